//! Attention of current video queries against cached source keys and
//! values, and the mask-driven fusion of the two pathways.

use crate::error::{config_err, shape_err, Result};
use crate::numerics::{matmul, softmax_rows, transpose, Tensor};

use super::mask::AttnMask;

/// Where the source-subject suppression enters the attention weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SuppressMode {
    /// Multiply the post-softmax weights by `1 - M_src` along the key axis,
    /// without renormalising.
    #[default]
    Literal,
    /// Exclude source-subject keys before the softmax so each row still sums
    /// to one. A row with every key excluded attends to nothing.
    PreSoftmax,
}

impl std::str::FromStr for SuppressMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(Self::Literal),
            "pre-softmax" | "presoftmax" => Ok(Self::PreSoftmax),
            _ => Err(config_err!("unknown suppression mode {s:?} (literal | pre-softmax)")),
        }
    }
}

impl std::fmt::Display for SuppressMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Literal => "literal",
            Self::PreSoftmax => "pre-softmax",
        })
    }
}

/// Per-head attention of `q` (`n × d_head`) over cached `k_src`, `v_src`
/// (`n_src × d_head`), returning the concatenated head outputs `n × d`.
pub fn shared_attention(
    q: &[Tensor],
    k_src: &[Tensor],
    v_src: &[Tensor],
    m_src: &AttnMask,
    mode: SuppressMode,
) -> Result<Tensor> {
    if q.is_empty() || q.len() != k_src.len() || q.len() != v_src.len() {
        return Err(config_err!(
            "cached heads ({}, {}) do not match current heads ({})",
            k_src.len(),
            v_src.len(),
            q.len()
        ));
    }
    let (n, dh) = q[0].dims2()?;
    let (n_src, dk) = k_src[0].dims2()?;
    if dk != dh || v_src[0].dims2()? != (n_src, dh) || m_src.len() != n_src {
        return Err(config_err!(
            "cached source layout ({n_src}×{dk}, mask {}) incompatible with queries {n}×{dh}",
            m_src.len()
        ));
    }
    let keep: Vec<f32> = m_src.values.data().iter().map(|m| 1.0 - m).collect();
    let scale = 1.0 / (dh as f32).sqrt();
    let heads = q.len();
    let mut out = vec![0.0f32; n * heads * dh];
    for h in 0..heads {
        if q[h].dims2()? != (n, dh) || k_src[h].dims2()? != (n_src, dh) || v_src[h].dims2()? != (n_src, dh) {
            return Err(shape_err!("head {h} has inconsistent shapes"));
        }
        let s = matmul(&q[h], &transpose(&k_src[h])?)?.scale(scale);
        let a = match mode {
            SuppressMode::Literal => {
                let mut a = softmax_rows(&s)?;
                for row in a.data_mut().chunks_mut(n_src) {
                    row.iter_mut().zip(&keep).for_each(|(x, k)| *x *= k);
                }
                a
            }
            SuppressMode::PreSoftmax => presoftmax(&s, &keep),
        };
        let o = matmul(&a, &v_src[h])?;
        for i in 0..n {
            out[i * heads * dh + h * dh..i * heads * dh + (h + 1) * dh].copy_from_slice(o.row(i));
        }
    }
    Tensor::new(vec![n, heads * dh], out)
}

fn presoftmax(s: &Tensor, keep: &[f32]) -> Tensor {
    let n_src = keep.len();
    let mut out = s.clone();
    for row in out.data_mut().chunks_mut(n_src) {
        let m = row
            .iter()
            .zip(keep)
            .filter(|(_, &k)| k != 0.0)
            .map(|(&x, _)| x)
            .fold(f32::NEG_INFINITY, f32::max);
        if m == f32::NEG_INFINITY {
            row.iter_mut().for_each(|x| *x = 0.0);
            continue;
        }
        let mut z = 0.0f64;
        for (x, &k) in row.iter_mut().zip(keep) {
            *x = if k != 0.0 { (*x - m).exp() } else { 0.0 };
            z += *x as f64;
        }
        row.iter_mut().for_each(|x| *x = (*x as f64 / z) as f32);
    }
    out
}

/// Row-wise selection: tokens in `M ∨ M_src` keep the current output,
/// the common background takes the source-attended output.
pub fn fuse(current: &Tensor, from_src: &Tensor, m: &AttnMask, m_src: &AttnMask) -> Result<Tensor> {
    let (n, d) = current.dims2()?;
    if from_src.dims2()? != (n, d) || m.len() != n || m_src.len() != n {
        return Err(shape_err!(
            "fusion operands disagree: {:?}, {:?}, masks {} and {}",
            current.shape(),
            from_src.shape(),
            m.len(),
            m_src.len()
        ));
    }
    let mut out = current.clone();
    for i in 0..n {
        if !(m.get(i) || m_src.get(i)) {
            out.data_mut()[i * d..(i + 1) * d].copy_from_slice(from_src.row(i));
        }
    }
    Ok(out)
}
