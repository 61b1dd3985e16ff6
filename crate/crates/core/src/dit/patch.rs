//! `(1, 2, 2)` patch arithmetic between latent grids and token sequences.
//!
//! Token `i = (j · h/2 + y) · w/2 + x` covers latent frame `j`, rows
//! `2y..2y+2` and columns `2x..2x+2`. Within a token the features are
//! ordered `(channel, dy, dx)`.

use crate::error::{shape_err, Result};
use crate::numerics::{Position, Tensor};

use super::config::ImageShift;

pub const PATCH: usize = 2;
pub const PATCH_AREA: usize = PATCH * PATCH;

/// `f · (h/2) · (w/2)`.
pub fn token_count(f: usize, h: usize, w: usize) -> Result<usize> {
    if h % PATCH != 0 || w % PATCH != 0 || h == 0 || w == 0 || f == 0 {
        return Err(shape_err!(
            "latent grid f={f} h={h} w={w} cannot be split into (1,2,2) patches"
        ));
    }
    Ok(f * (h / PATCH) * (w / PATCH))
}

fn grid4(t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [c, f, h, w] => Ok((c, f, h, w)),
        _ => Err(shape_err!("expected a c×f×h×w latent, got {:?}", t.shape())),
    }
}

/// Channel-concatenates the parts and unfolds them into `n × (C·4)`.
pub fn patch_matrix(parts: &[&Tensor]) -> Result<Tensor> {
    let (_, f, h, w) = grid4(parts.first().ok_or_else(|| shape_err!("no latents to patchify"))?)?;
    for p in parts {
        let (_, pf, ph, pw) = grid4(p)?;
        if (pf, ph, pw) != (f, h, w) {
            return Err(shape_err!(
                "latent grids disagree: {:?} vs f={f} h={h} w={w}",
                p.shape()
            ));
        }
    }
    let n = token_count(f, h, w)?;
    let total: usize = parts.iter().map(|p| p.shape()[0]).sum();
    let width = total * PATCH_AREA;
    let (hp, wp) = (h / PATCH, w / PATCH);
    let mut out = vec![0.0f32; n * width];
    let mut ch0 = 0;
    for p in parts {
        let c = p.shape()[0];
        let d = p.data();
        for ch in 0..c {
            for j in 0..f {
                for y in 0..hp {
                    for x in 0..wp {
                        let tok = (j * hp + y) * wp + x;
                        for dy in 0..PATCH {
                            for dx in 0..PATCH {
                                let src = ((ch * f + j) * h + PATCH * y + dy) * w + PATCH * x + dx;
                                let col = (ch0 + ch) * PATCH_AREA + dy * PATCH + dx;
                                out[tok * width + col] = d[src];
                            }
                        }
                    }
                }
            }
        }
        ch0 += c;
    }
    Tensor::new(vec![n, width], out)
}

/// Gather indices mapping an `n × (c·4)` token matrix back to `c×f×h×w`.
pub fn unpatchify_index(c: usize, f: usize, h: usize, w: usize) -> Result<Vec<usize>> {
    token_count(f, h, w)?;
    let (hp, wp) = (h / PATCH, w / PATCH);
    let width = c * PATCH_AREA;
    let mut idx = Vec::with_capacity(c * f * h * w);
    for ch in 0..c {
        for j in 0..f {
            for yy in 0..h {
                for xx in 0..w {
                    let tok = (j * hp + yy / PATCH) * wp + xx / PATCH;
                    let col = ch * PATCH_AREA + (yy % PATCH) * PATCH + xx % PATCH;
                    idx.push(tok * width + col);
                }
            }
        }
    }
    Ok(idx)
}

/// Grid positions `(j, y, x)` of the video tokens.
pub fn video_positions(f: usize, h: usize, w: usize) -> Vec<Position> {
    let (hp, wp) = (h / PATCH, w / PATCH);
    let mut out = Vec::with_capacity(f * hp * wp);
    for j in 0..f {
        for y in 0..hp {
            for x in 0..wp {
                out.push([j as i32, y as i32, x as i32]);
            }
        }
    }
    out
}

/// Positions of reference-image tokens, shifted off the video grid.
pub fn image_positions(f: usize, h: usize, w: usize, shift: ImageShift) -> Vec<Position> {
    let (hp, wp) = (h / PATCH, w / PATCH);
    let mut out = Vec::with_capacity(hp * wp);
    for y in 0..hp {
        for x in 0..wp {
            out.push(match shift {
                ImageShift::Width => [0, y as i32, (x + wp) as i32],
                ImageShift::Temporal => [f as i32, y as i32, x as i32],
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn counts() {
        assert_eq!(token_count(5, 8, 8).unwrap(), 80);
        assert_eq!(token_count(1, 8, 8).unwrap(), 16);
        assert!(token_count(1, 3, 8).is_err());
    }

    #[test]
    fn unpatchify_inverts_patchify() {
        let mut rng = Rng::new(1);
        let z = rng.normal_tensor(&[3, 2, 4, 6], 1.0);
        let m = patch_matrix(&[&z]).unwrap();
        let idx = unpatchify_index(3, 2, 4, 6).unwrap();
        let back: Vec<f32> = idx.iter().map(|&i| m.data()[i]).collect();
        assert_eq!(back, z.data());
    }

    #[test]
    fn image_positions_avoid_video_grid() {
        for shift in [ImageShift::Width, ImageShift::Temporal] {
            let v = video_positions(3, 4, 6);
            let i = image_positions(3, 4, 6, shift);
            assert_eq!(i.len(), 6);
            assert!(i.iter().all(|p| !v.contains(p)));
        }
    }
}
