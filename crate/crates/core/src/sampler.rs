//! Rectified-flow noising and Euler sampling with frame retention.
//!
//! `x_t = (1 - t) x0 + t eps`; the model predicts the velocity `eps - x0`
//! and sampling integrates from `t = 1` to `t = 0` on the uniform grid
//! `t_k = 1 - k/T`.

use crate::codec::latent_frame_span;
use crate::dit::{AttentionHook, ConditionBundle, DitModel, ForwardOptions};
use crate::error::{config_err, shape_err, Error, Result};
use crate::numerics::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    /// Generate every frame.
    Base,
    /// Preserve the first and last quarter.
    Stitch,
}

/// `max(1, floor(frames · ratio))`.
pub fn retain_count(frames: usize, ratio: f64) -> usize {
    ((frames as f64 * ratio).floor() as usize).max(1)
}

/// Pixel-frame flags, `true` = preserve.
pub fn build_frame_mask(kind: MaskKind, frames: usize, ratio: f64) -> Result<Vec<bool>> {
    if !(0.0..=0.5).contains(&ratio) {
        return Err(config_err!("retain ratio {ratio} outside [0, 0.5]"));
    }
    match kind {
        MaskKind::Base => Ok(vec![false; frames]),
        MaskKind::Stitch => {
            if frames < 4 {
                return Err(config_err!("stitch mask needs at least 4 frames, got {frames}"));
            }
            let q = retain_count(frames, ratio);
            Ok((0..frames).map(|i| i < q || i >= frames - q).collect())
        }
    }
}

/// Flags for a segment generated with one leading context frame ahead of
/// `content` frames: the lead frame plus the first and last `q` content
/// frames are preserved, so each retained run fills whole latent blocks.
pub fn lead_stitch_flags(content: usize, ratio: f64) -> Result<Vec<bool>> {
    let mut flags = vec![true];
    flags.extend(build_frame_mask(MaskKind::Stitch, content, ratio)?);
    Ok(flags)
}

/// Pixel flags together with their packed latent form.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMask {
    pub pixel_flags: Vec<bool>,
    /// `s × f × h × w`; slot `i` of latent frame `j > 0` holds the flag of
    /// pixel frame `1 + (j-1)s + i`, latent frame 0 broadcasts frame 0.
    pub latent_mask: Tensor,
}

impl FrameMask {
    /// Packs flags for a codec-valid frame count with `slots` equal to the
    /// temporal stride.
    pub fn pack(flags: &[bool], slots: usize, h: usize, w: usize) -> Result<Self> {
        let frames = flags.len();
        if slots == 0 || frames == 0 || (frames - 1) % slots != 0 {
            return Err(shape_err!("{frames} frames cannot be packed into {slots} mask slots"));
        }
        let f = (frames - 1) / slots + 1;
        let plane = h * w;
        let mut data = vec![0.0f32; slots * f * plane];
        for i in 0..slots {
            for j in 0..f {
                let span = latent_frame_span(j, slots);
                let src = if j == 0 { 0 } else { span.start + i };
                if flags[src] {
                    let at = (i * f + j) * plane;
                    data[at..at + plane].iter_mut().for_each(|x| *x = 1.0);
                }
            }
        }
        Ok(Self {
            pixel_flags: flags.to_vec(),
            latent_mask: Tensor::new(vec![slots, f, h, w], data)?,
        })
    }

    pub fn build(kind: MaskKind, frames: usize, ratio: f64, slots: usize, h: usize, w: usize) -> Result<Self> {
        Self::pack(&build_frame_mask(kind, frames, ratio)?, slots, h, w)
    }

    /// Recovers pixel flags from a packed mask (reads position `(0, 0)`).
    pub fn unpack(latent_mask: &Tensor) -> Result<Vec<bool>> {
        let [slots, f, h, w] = *latent_mask.shape() else {
            return Err(shape_err!("packed mask must be s×f×h×w, got {:?}", latent_mask.shape()));
        };
        let at = |i: usize, j: usize| latent_mask.data()[(i * f + j) * h * w] != 0.0;
        let mut flags = vec![at(0, 0)];
        for j in 1..f {
            flags.extend((0..slots).map(|i| at(i, j)));
        }
        Ok(flags)
    }

    pub fn slots(&self) -> usize {
        self.latent_mask.shape()[0]
    }

    /// Latent frames whose every pixel frame is preserved.
    pub fn preserved_latent_frames(&self) -> Vec<bool> {
        let f = self.latent_mask.shape()[1];
        (0..f)
            .map(|j| latent_frame_span(j, self.slots()).all(|i| self.pixel_flags[i]))
            .collect()
    }

    pub fn has_preserved(&self) -> bool {
        self.preserved_latent_frames().iter().any(|&p| p)
    }
}

/// `(1 - t) x0 + t eps`.
pub fn noise(x0: &Tensor, eps: &Tensor, t: f32) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(config_err!("noise level {t} outside [0, 1]"));
    }
    x0.zip_map(eps, |a, e| (1.0 - t) * a + t * e)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 20, seed: 0 }
    }
}

/// `t_k = 1 - k/T` for `k = 0..=T`.
pub fn schedule(steps: usize) -> Vec<f32> {
    (0..=steps).map(|k| (1.0 - k as f64 / steps as f64) as f32).collect()
}

pub trait VelocityModel: Sync {
    fn velocity(&self, bundle: &ConditionBundle, t: f32, hook: &mut dyn AttentionHook) -> Result<Tensor>;
}

impl VelocityModel for DitModel {
    fn velocity(&self, bundle: &ConditionBundle, t: f32, hook: &mut dyn AttentionHook) -> Result<Tensor> {
        self.predict(bundle, t, ForwardOptions::default(), hook)
    }
}

/// Predicts zero velocity everywhere.
pub struct ZeroVelocity;

impl VelocityModel for ZeroVelocity {
    fn velocity(&self, bundle: &ConditionBundle, _t: f32, _hook: &mut dyn AttentionHook) -> Result<Tensor> {
        Ok(Tensor::zeros(bundle.z_vid.shape()))
    }
}

/// Overwrites preserved latent frames of `x` with `noise(preserved, eps, t)`.
fn pin(x: &mut Tensor, preserved: &Tensor, eps: &Tensor, keep: &[bool], t: f32) {
    let [c, f, h, w] = *x.shape() else { unreachable!() };
    let plane = h * w;
    let (p, e) = (preserved.data(), eps.data());
    let xd = x.data_mut();
    for ch in 0..c {
        for (j, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
            let at = (ch * f + j) * plane;
            for i in at..at + plane {
                xd[i] = if t == 0.0 { p[i] } else { (1.0 - t) * p[i] + t * e[i] };
            }
        }
    }
}

/// Integrates the velocity field from pure noise to `t = 0`.
///
/// `template` supplies every condition; its `z_vid` only fixes the shape
/// and its mask is replaced by `mask`. Preserved latent frames follow the
/// noised path of `preserved` and equal it exactly at the end. The hook
/// sees timestep indices `T, T-1, ..., 1`.
pub fn sample(
    model: &dyn VelocityModel,
    template: &ConditionBundle,
    mask: &FrameMask,
    preserved: Option<&Tensor>,
    cfg: &SamplerConfig,
    hook: &mut dyn AttentionHook,
) -> Result<Tensor> {
    if cfg.steps == 0 {
        return Err(config_err!("sampling needs at least one step"));
    }
    let shape = template.z_vid.shape().to_vec();
    let [_, f, h, w] = shape[..] else {
        return Err(shape_err!("z_vid must be c×f×h×w, got {shape:?}"));
    };
    if mask.latent_mask.shape()[1..] != [f, h, w] {
        return Err(shape_err!(
            "frame mask {:?} does not match latent grid {f}×{h}×{w}",
            mask.latent_mask.shape()
        ));
    }
    let keep = mask.preserved_latent_frames();
    let pinned = keep.iter().any(|&k| k);
    let preserved = match (pinned, preserved) {
        (true, None) => {
            return Err(Error::Usage("frame mask preserves frames but no latents were given".into()))
        }
        (true, Some(p)) if p.shape() != shape.as_slice() => {
            return Err(shape_err!("preserved latents {:?}, expected {shape:?}", p.shape()))
        }
        (true, p) => p,
        (false, _) => None,
    };

    let eps = Rng::new(cfg.seed).normal_tensor(&shape, 1.0);
    let mut bundle = ConditionBundle {
        z_vid: eps.clone(),
        mask: mask.latent_mask.clone(),
        ..template.clone()
    };
    let ts = schedule(cfg.steps);
    for k in 0..cfg.steps {
        let (t, t_next) = (ts[k], ts[k + 1]);
        hook.begin_pass(cfg.steps - k, cfg.steps)?;
        let v = model.velocity(&bundle, t, hook)?;
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite velocity at t={t}")));
        }
        let dt = t - t_next;
        let mut x = bundle.z_vid.zip_map(&v, |x, v| x - dt * v)?;
        if let Some(p) = preserved {
            pin(&mut x, p, &eps, &keep, t_next);
        }
        bundle.z_vid = x;
    }
    Ok(bundle.z_vid)
}
