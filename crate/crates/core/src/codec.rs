//! Fixed causal block codec standing in for the video VAE.
//!
//! Frame 0 is its own temporal block and later frames are grouped in
//! blocks of `temporal_stride`. Each `3 × len × 8 × 8` pixel block maps to
//! `channels` latent values: the first three are the per-colour block
//! means, the rest are seeded zero-mean projections that capture texture.
//! Decoding inverts the mean pathway only, so reconstructions are the
//! block-constant approximation of the input.

use std::ops::Range;

use crate::error::{shape_err, Result};
use crate::numerics::{Rng, Tensor};

pub const MEAN_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CodecConfig {
    pub channels: usize,
    pub temporal_stride: usize,
    pub spatial_stride: usize,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            channels: 8,
            temporal_stride: 4,
            spatial_stride: 8,
            seed: 0x00c0_dec0,
        }
    }
}

/// `3 × F × H × W` video with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelVideo {
    pub frames: Tensor,
}

/// `c × f × h × w` latents.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVideo {
    pub latents: Tensor,
}

impl PixelVideo {
    pub fn new(frames: Tensor) -> Result<Self> {
        match frames.shape() {
            [3, f, _, _] if *f >= 1 => Ok(Self { frames }),
            s => Err(shape_err!("pixel video must be 3×F×H×W, got {s:?}")),
        }
    }

    pub fn zeros(f: usize, h: usize, w: usize) -> Self {
        Self {
            frames: Tensor::zeros(&[3, f, h, w]),
        }
    }

    /// `(F, H, W)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.frames.shape();
        (s[1], s[2], s[3])
    }

    pub fn num_frames(&self) -> usize {
        self.dims().0
    }

    /// One frame as `3 × H × W`.
    pub fn frame(&self, f: usize) -> Tensor {
        let (nf, h, w) = self.dims();
        let plane = h * w;
        let mut out = Vec::with_capacity(3 * plane);
        for ch in 0..3 {
            let at = (ch * nf + f) * plane;
            out.extend_from_slice(&self.frames.data()[at..at + plane]);
        }
        Tensor::new(vec![3, h, w], out).expect("frame shape")
    }

    pub fn set_frame(&mut self, f: usize, frame: &Tensor) {
        let (nf, h, w) = self.dims();
        let plane = h * w;
        assert_eq!(frame.shape(), [3, h, w], "frame shape mismatch");
        for ch in 0..3 {
            let at = (ch * nf + f) * plane;
            self.frames.data_mut()[at..at + plane]
                .copy_from_slice(&frame.data()[ch * plane..(ch + 1) * plane]);
        }
    }

    pub fn from_frames(frames: &[Tensor]) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| shape_err!("video needs at least one frame"))?;
        let (h, w) = match first.shape() {
            [3, h, w] => (*h, *w),
            s => return Err(shape_err!("frame must be 3×H×W, got {s:?}")),
        };
        let mut v = Self::zeros(frames.len(), h, w);
        for (i, f) in frames.iter().enumerate() {
            if f.shape() != [3, h, w] {
                return Err(shape_err!("frame {i} has shape {:?}", f.shape()));
            }
            v.set_frame(i, f);
        }
        Ok(v)
    }
}

impl LatentVideo {
    /// `(c, f, h, w)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.latents.shape();
        (s[0], s[1], s[2], s[3])
    }

    pub fn zeros(c: usize, f: usize, h: usize, w: usize) -> Self {
        Self {
            latents: Tensor::zeros(&[c, f, h, w]),
        }
    }
}

/// `(c, f, h, w)` for a pixel video of `F × H × W`.
pub fn latent_shape(
    frames: usize,
    height: usize,
    width: usize,
    cfg: &CodecConfig,
) -> Result<(usize, usize, usize, usize)> {
    let s = cfg.temporal_stride;
    let p = cfg.spatial_stride;
    if frames == 0 || (frames - 1) % s != 0 {
        return Err(shape_err!(
            "frame count F={frames}: F-1 must be a non-negative multiple of the temporal stride {s}"
        ));
    }
    if height == 0 || height % p != 0 {
        return Err(shape_err!(
            "height H={height} must be a positive multiple of the spatial stride {p}"
        ));
    }
    if width == 0 || width % p != 0 {
        return Err(shape_err!(
            "width W={width} must be a positive multiple of the spatial stride {p}"
        ));
    }
    Ok((cfg.channels, (frames - 1) / s + 1, height / p, width / p))
}

/// Pixel frames covered by latent frame `j`.
pub fn latent_frame_span(j: usize, temporal_stride: usize) -> Range<usize> {
    if j == 0 {
        0..1
    } else {
        1 + (j - 1) * temporal_stride..1 + j * temporal_stride
    }
}

/// Latent frame holding pixel frame `f`.
pub fn latent_frame_of(f: usize, temporal_stride: usize) -> usize {
    if f == 0 {
        0
    } else {
        (f - 1) / temporal_stride + 1
    }
}

/// Smallest codec-valid frame count that is `>= frames`.
pub fn valid_frame_count(frames: usize, temporal_stride: usize) -> usize {
    let f = frames.max(1);
    let rem = (f - 1) % temporal_stride;
    if rem == 0 {
        f
    } else {
        f + temporal_stride - rem
    }
}

/// The frozen codec: configuration plus its seeded texture projections.
#[derive(Clone, Debug)]
pub struct Codec {
    cfg: CodecConfig,
    // Indexed by block length: [0] for the singleton first frame, [1] for full blocks.
    texture: [Vec<Vec<f64>>; 2],
}

impl Codec {
    pub fn new(cfg: CodecConfig) -> Result<Self> {
        if cfg.channels < MEAN_CHANNELS {
            return Err(crate::error::config_err!(
                "codec needs at least {MEAN_CHANNELS} channels, got {}",
                cfg.channels
            ));
        }
        if cfg.temporal_stride == 0 || cfg.spatial_stride == 0 {
            return Err(crate::error::config_err!("codec strides must be positive"));
        }
        let rng = Rng::new(cfg.seed);
        let make = |len: usize, stream: u64| -> Vec<Vec<f64>> {
            let mut r = rng.split(stream);
            let per_ch = len * cfg.spatial_stride * cfg.spatial_stride;
            let n = 3 * per_ch;
            (MEAN_CHANNELS..cfg.channels)
                .map(|_| {
                    let mut row: Vec<f64> =
                        (0..n).map(|_| r.normal() as f64 / (n as f64).sqrt()).collect();
                    // zero-sum within each colour so constant blocks carry no texture
                    for ch in 0..3 {
                        let part = &mut row[ch * per_ch..(ch + 1) * per_ch];
                        let m = part.iter().sum::<f64>() / per_ch as f64;
                        part.iter_mut().for_each(|x| *x -= m);
                    }
                    row
                })
                .collect()
        };
        let texture = [make(1, 1), make(cfg.temporal_stride, 2)];
        Ok(Self { cfg, texture })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    pub fn encode(&self, video: &PixelVideo) -> Result<LatentVideo> {
        let (nf, hh, ww) = video.dims();
        let (c, f, h, w) = latent_shape(nf, hh, ww, &self.cfg)?;
        let p = self.cfg.spatial_stride;
        let s = self.cfg.temporal_stride;
        let src = video.frames.data();
        let mut out = vec![0.0f32; c * f * h * w];
        let mut block = Vec::with_capacity(3 * s * p * p);
        for j in 0..f {
            let span = latent_frame_span(j, s);
            let texture = &self.texture[usize::from(j > 0)];
            for by in 0..h {
                for bx in 0..w {
                    block.clear();
                    for ch in 0..3 {
                        for fr in span.clone() {
                            for dy in 0..p {
                                let row = ((ch * nf + fr) * hh + by * p + dy) * ww + bx * p;
                                block.extend(src[row..row + p].iter().map(|&v| v as f64));
                            }
                        }
                    }
                    let per_ch = block.len() / 3;
                    let at = |k: usize| ((k * f + j) * h + by) * w + bx;
                    for ch in 0..MEAN_CHANNELS {
                        // f64 sums of f32 inputs are exact here, so block-constant
                        // inputs reproduce their value bit-for-bit
                        let part = &mut block[ch * per_ch..(ch + 1) * per_ch];
                        let mean = part.iter().sum::<f64>() / per_ch as f64;
                        out[at(ch)] = mean as f32;
                        part.iter_mut().for_each(|x| *x -= mean);
                    }
                    for (k, row) in texture.iter().enumerate() {
                        let dot: f64 = row.iter().zip(&block).map(|(a, b)| a * b).sum();
                        out[at(MEAN_CHANNELS + k)] = dot as f32;
                    }
                }
            }
        }
        Ok(LatentVideo {
            latents: Tensor::new(vec![c, f, h, w], out)?,
        })
    }

    pub fn decode(&self, latents: &LatentVideo) -> Result<PixelVideo> {
        let (c, f, h, w) = latents.dims();
        if c != self.cfg.channels {
            return Err(shape_err!(
                "latents carry {c} channels, codec expects {}",
                self.cfg.channels
            ));
        }
        let p = self.cfg.spatial_stride;
        let s = self.cfg.temporal_stride;
        let nf = (f - 1) * s + 1;
        let (hh, ww) = (h * p, w * p);
        let src = latents.latents.data();
        let mut out = vec![0.0f32; 3 * nf * hh * ww];
        for ch in 0..3 {
            for j in 0..f {
                for by in 0..h {
                    for bx in 0..w {
                        let v = src[((ch * f + j) * h + by) * w + bx].clamp(0.0, 1.0);
                        for fr in latent_frame_span(j, s) {
                            for dy in 0..p {
                                let row = ((ch * nf + fr) * hh + by * p + dy) * ww + bx * p;
                                out[row..row + p].iter_mut().for_each(|x| *x = v);
                            }
                        }
                    }
                }
            }
        }
        PixelVideo::new(Tensor::new(vec![3, nf, hh, ww], out)?)
    }

    /// Encodes a single `3 × H × W` image as a one-frame latent.
    pub fn encode_image(&self, image: &Tensor) -> Result<LatentVideo> {
        let (h, w) = match image.shape() {
            [3, h, w] => (*h, *w),
            s => return Err(shape_err!("image must be 3×H×W, got {s:?}")),
        };
        let video = PixelVideo::new(image.clone().reshape(vec![3, 1, h, w])?)?;
        self.encode(&video)
    }
}
