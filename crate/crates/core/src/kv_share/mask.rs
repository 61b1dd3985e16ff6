//! Subject masks from text-to-video cross-attention logits.

use crate::error::{config_err, Error, Result};
use crate::numerics::Tensor;

pub const OTSU_BINS: usize = 64;

/// Binary per-video-token mask, 1 marking the subject.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMask {
    /// `n_vid` values in `{0, 1}`.
    pub values: Tensor,
    /// 1-based layer the mask belongs to.
    pub layer: usize,
    /// Set when no subject could be separated (constant attention map).
    pub degenerate: bool,
}

impl AttnMask {
    pub fn new(values: Vec<f32>, layer: usize) -> Self {
        debug_assert!(values.iter().all(|&v| v == 0.0 || v == 1.0));
        let n = values.len();
        Self {
            values: Tensor::new(vec![n], values).expect("mask vector"),
            layer,
            degenerate: false,
        }
    }

    pub fn ones(n: usize, layer: usize) -> Self {
        Self::new(vec![1.0; n], layer)
    }

    pub fn zeros(n: usize, layer: usize) -> Self {
        Self::new(vec![0.0; n], layer)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.values.data()[i] != 0.0
    }

    pub fn count(&self) -> usize {
        self.values.data().iter().filter(|&&v| v != 0.0).count()
    }
}

/// Mean over subject caption tokens and heads of the scaled logits
/// `q_text,i · k_vid,j / sqrt(d_head)`. With `softmax`, each caption row is
/// normalised over the video tokens before averaging.
pub fn subject_attn_map(
    q_text: &[Tensor],
    k_vid: &[Tensor],
    subject: &[usize],
    softmax: bool,
) -> Result<Vec<f32>> {
    if subject.is_empty() {
        return Err(config_err!("subject token index set is empty"));
    }
    if q_text.is_empty() || q_text.len() != k_vid.len() {
        return Err(config_err!(
            "head count mismatch: {} query heads, {} key heads",
            q_text.len(),
            k_vid.len()
        ));
    }
    let (n_text, dh) = q_text[0].dims2()?;
    let (n_vid, dk) = k_vid[0].dims2()?;
    if dk != dh {
        return Err(config_err!("query head dim {dh} != key head dim {dk}"));
    }
    if let Some(&bad) = subject.iter().find(|&&i| i >= n_text) {
        return Err(config_err!("subject token {bad} outside caption of length {n_text}"));
    }
    let scale = 1.0 / (dh as f64).sqrt();
    let mut acc = vec![0.0f64; n_vid];
    let mut row = vec![0.0f64; n_vid];
    for (q, k) in q_text.iter().zip(k_vid) {
        for &i in subject {
            let qi = q.row(i);
            for (j, r) in row.iter_mut().enumerate() {
                let kj = k.row(j);
                *r = qi.iter().zip(kj).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() * scale;
            }
            if softmax {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.iter_mut().for_each(|r| *r = (*r - m).exp());
                let z: f64 = row.iter().sum();
                row.iter_mut().for_each(|r| *r /= z);
            }
            acc.iter_mut().zip(&row).for_each(|(a, r)| *a += r);
        }
    }
    let denom = (subject.len() * q_text.len()) as f64;
    Ok(acc.into_iter().map(|a| (a / denom) as f32).collect())
}

/// Result of a histogram threshold search.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Otsu {
    pub threshold: f32,
    /// First histogram bin of the upper class; `0` when degenerate.
    pub bin: usize,
    pub degenerate: bool,
}

/// Histogram bin of `v` for `OTSU_BINS` equal bins spanning `[lo, hi]`.
pub fn histogram_bin(v: f32, lo: f32, hi: f32) -> usize {
    let t = (v as f64 - lo as f64) / (hi as f64 - lo as f64);
    ((t * OTSU_BINS as f64).floor() as usize).min(OTSU_BINS - 1)
}

fn range(values: &[f32]) -> Result<(f32, f32)> {
    if values.len() < 2 {
        return Err(config_err!("thresholding needs at least two values, got {}", values.len()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite value in attention map".into()));
    }
    let lo = values.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    Ok((lo, hi))
}

/// Otsu's threshold over a 64-bin histogram. Candidate thresholds are the
/// inner bin boundaries; the between-class variance is compared exactly in
/// integer arithmetic, ties going to the lowest boundary.
pub fn otsu_threshold(values: &[f32]) -> Result<Otsu> {
    let (lo, hi) = range(values)?;
    if lo == hi {
        return Ok(Otsu {
            threshold: lo,
            bin: 0,
            degenerate: true,
        });
    }
    let mut hist = [0u64; OTSU_BINS];
    for &v in values {
        hist[histogram_bin(v, lo, hi)] += 1;
    }
    let n: u64 = values.len() as u64;
    let s: u64 = hist.iter().enumerate().map(|(b, &c)| b as u64 * c).sum();
    // w0 w1 (mu0 - mu1)^2 = (n1 s0 - n0 s1)^2 / (n0 n1 n^2); compare num/den pairs.
    let mut best: Option<(usize, u128, u128)> = None;
    let (mut n0, mut s0) = (0u64, 0u64);
    for k in 1..OTSU_BINS {
        n0 += hist[k - 1];
        s0 += (k as u64 - 1) * hist[k - 1];
        let (n1, s1) = (n - n0, s - s0);
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let diff = (n1 as i128 * s0 as i128 - n0 as i128 * s1 as i128).unsigned_abs();
        let num = diff * diff;
        let den = n0 as u128 * n1 as u128;
        let better = match best {
            None => true,
            Some((_, bn, bd)) => num * bd > bn * den,
        };
        if better {
            best = Some((k, num, den));
        }
    }
    let (bin, _, _) = best.expect("two distinct values occupy two bins");
    Ok(Otsu {
        threshold: (lo as f64 + bin as f64 * (hi as f64 - lo as f64) / OTSU_BINS as f64) as f32,
        bin,
        degenerate: false,
    })
}

/// Binarises a map with Otsu's threshold: values in the upper class
/// become 1. A constant map yields all zeros and is flagged degenerate.
pub fn threshold_map(values: &[f32]) -> Result<(Vec<f32>, Otsu)> {
    let o = otsu_threshold(values)?;
    if o.degenerate {
        return Ok((vec![0.0; values.len()], o));
    }
    let (lo, hi) = range(values)?;
    let mask = values
        .iter()
        .map(|&v| if histogram_bin(v, lo, hi) >= o.bin { 1.0 } else { 0.0 })
        .collect();
    Ok((mask, o))
}

/// Per-token mean of binarised maps from layers `1..=l`, re-binarised by
/// majority (mean >= 0.5).
pub fn layer_mask(maps: &[Vec<f32>], layer: usize) -> Result<AttnMask> {
    let first = maps.first().ok_or_else(|| config_err!("layer mask needs at least one map"))?;
    let n = first.len();
    if maps.iter().any(|m| m.len() != n) {
        return Err(config_err!("binarised maps differ in length"));
    }
    let l = maps.len() as f64;
    let values = (0..n)
        .map(|j| {
            let mean = maps.iter().map(|m| m[j] as f64).sum::<f64>() / l;
            if mean >= 0.5 {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Ok(AttnMask::new(values, layer))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bimodal_example() {
        let v = [0.1, 0.2, 0.15, 0.8, 0.9, 0.85];
        let (m, o) = threshold_map(&v).unwrap();
        assert_eq!(m, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert!(!o.degenerate);
        assert!(o.threshold > 0.2 && o.threshold <= 0.8);
    }

    #[test]
    fn two_points_and_constant() {
        assert_eq!(threshold_map(&[0.0, 1.0]).unwrap().0, vec![0.0, 1.0]);
        let (m, o) = threshold_map(&[0.3; 5]).unwrap();
        assert!(o.degenerate);
        assert_eq!(o.threshold, 0.3);
        assert!(m.iter().all(|&x| x == 0.0));
        assert!(otsu_threshold(&[1.0]).is_err());
        assert!(matches!(otsu_threshold(&[1.0, f32::NAN]), Err(Error::Numeric(_))));
    }

    #[test]
    fn single_layer_mask_is_its_binarisation() {
        let a = vec![1.0, 0.0, 1.0, 1.0];
        assert_eq!(layer_mask(std::slice::from_ref(&a), 1).unwrap().values.data(), &a[..]);
        let b = vec![0.0, 0.0, 1.0, 0.0];
        let m = layer_mask(&[a.clone(), b.clone(), b], 3).unwrap();
        assert_eq!(m.values.data(), &[0.0, 0.0, 1.0, 0.0]);
        assert!(layer_mask(&[], 1).is_err());
    }

    #[test]
    fn empty_subject_is_rejected() {
        let q = vec![Tensor::zeros(&[2, 4])];
        let k = vec![Tensor::zeros(&[3, 4])];
        assert!(subject_attn_map(&q, &k, &[], false).is_err());
        assert!(subject_attn_map(&q, &k, &[2], false).is_err());
        assert_eq!(subject_attn_map(&q, &k, &[1], false).unwrap(), vec![0.0; 3]);
    }
}
