//! Forward kernels shared by the autodiff tape and the inference paths.
//!
//! Reductions accumulate in `f64` and round once, which keeps results
//! independent of summation length and makes finite-difference checks
//! meaningful at `f32` storage precision.

use crate::error::{config_err, shape_err, Result};

use super::tensor::Tensor;

pub const RMS_EPS: f64 = 1e-6;
pub const ROPE_BASE: f64 = 10_000.0;

/// A token's `(t, y, x)` grid index.
pub type Position = [i32; 3];

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, p) = b.dims2()?;
    if k != k2 {
        return Err(shape_err!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0f32; m * p];
    let mut acc = vec![0.0f64; p];
    for i in 0..m {
        acc.iter_mut().for_each(|x| *x = 0.0);
        for kk in 0..k {
            let aik = ad[i * k + kk] as f64;
            if aik == 0.0 {
                continue;
            }
            let brow = &bd[kk * p..(kk + 1) * p];
            for (acc_j, &b) in acc.iter_mut().zip(brow) {
                *acc_j += aik * b as f64;
            }
        }
        for (o, &s) in out[i * p..(i + 1) * p].iter_mut().zip(&acc) {
            *o = s as f32;
        }
    }
    Tensor::new(vec![m, p], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    let d = a.data();
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Row-wise softmax, stabilised by subtracting the row maximum.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = x.dims2()?;
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let row = x.row(i);
        let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (o, e) in out[i * n..(i + 1) * n].iter_mut().zip(&exps) {
            *o = (e / z) as f32;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Per-row inverse RMS, `1 / sqrt(mean(x^2) + eps)`.
pub(crate) fn inv_rms_rows(x: &Tensor) -> Result<Vec<f64>> {
    let (m, n) = x.dims2()?;
    Ok((0..m)
        .map(|i| {
            let ms = x.row(i).iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / n as f64;
            1.0 / (ms + RMS_EPS).sqrt()
        })
        .collect())
}

pub fn rms_norm(x: &Tensor, gain: &Tensor) -> Result<Tensor> {
    let (m, n) = x.dims2()?;
    if gain.shape() != [n] {
        return Err(shape_err!(
            "rms_norm gain {:?} does not match rows of {:?}",
            gain.shape(),
            x.shape()
        ));
    }
    let inv = inv_rms_rows(x)?;
    let g = gain.data();
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for (j, &v) in x.row(i).iter().enumerate() {
            out[i * n + j] = (v as f64 * inv[i] * g[j] as f64) as f32;
        }
    }
    Tensor::new(vec![m, n], out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

/// Tanh-approximated GELU.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(|v| gelu_scalar(v as f64) as f32)
}

/// Split of a rotary dimension into temporal / height / width pair groups.
///
/// Height and width each receive `pairs / 3` rotation pairs and the
/// temporal axis takes the remainder, so a dimension divisible by six
/// gets three equal groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RopeLayout {
    pub dim: usize,
    pub axis_pairs: [usize; 3],
}

impl RopeLayout {
    pub fn for_dim(dim: usize) -> Result<Self> {
        if dim % 2 != 0 || dim < 6 {
            return Err(config_err!(
                "rotary dimension {dim} must be even and at least 6 (one pair per axis)"
            ));
        }
        let pairs = dim / 2;
        let spatial = pairs / 3;
        Ok(Self {
            dim,
            axis_pairs: [pairs - 2 * spatial, spatial, spatial],
        })
    }

    /// Angle of every rotation pair for one position.
    pub fn angles(&self, pos: Position) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim / 2);
        for (axis, &n) in self.axis_pairs.iter().enumerate() {
            for j in 0..n {
                let freq = ROPE_BASE.powf(-(j as f64) / n as f64);
                out.push(pos[axis] as f64 * freq);
            }
        }
        out
    }
}

/// Rotates adjacent pairs `(2i, 2i+1)` of every row by its position's
/// angles. `sign = -1.0` applies the inverse rotation.
pub(crate) fn rope_rotate(
    x: &Tensor,
    positions: &[Position],
    layout: &RopeLayout,
    sign: f64,
) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    if d != layout.dim {
        return Err(config_err!(
            "rotary layout built for dim {} applied to rows of {}",
            layout.dim,
            d
        ));
    }
    if positions.len() != n {
        return Err(shape_err!(
            "{} positions supplied for {} rows",
            positions.len(),
            n
        ));
    }
    let mut out = x.data().to_vec();
    for (i, &pos) in positions.iter().enumerate() {
        let row = &mut out[i * d..(i + 1) * d];
        for (p, theta) in layout.angles(pos).into_iter().enumerate() {
            if theta == 0.0 {
                continue;
            }
            let (s, c) = (sign * theta).sin_cos();
            let (a, b) = (row[2 * p] as f64, row[2 * p + 1] as f64);
            row[2 * p] = (a * c - b * s) as f32;
            row[2 * p + 1] = (a * s + b * c) as f32;
        }
    }
    Tensor::new(vec![n, d], out)
}

/// Rotary position embedding over three axes.
pub fn rope_apply(x: &Tensor, positions: &[Position]) -> Result<Tensor> {
    let (_, d) = x.dims2()?;
    let layout = RopeLayout::for_dim(d)?;
    rope_rotate(x, positions, &layout, 1.0)
}
