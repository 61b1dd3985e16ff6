//! Direct-formula reference implementations in f64, independent of the
//! library code paths they check.

use posegen_core::kv_share::{histogram_bin, AttnMask, OTSU_BINS};
use posegen_core::numerics::{Position, Rng, Tensor};

pub fn affine(rows: &[Vec<f64>], w: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
    let (din, dout) = w.dims2().unwrap();
    rows.iter()
        .map(|r| {
            (0..dout)
                .map(|o| b.data()[o] as f64 + (0..din).map(|i| r[i] * w.get2(i, o) as f64).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn mm(x: &[Vec<f64>], w: &Tensor) -> Vec<Vec<f64>> {
    affine(x, w, &Tensor::zeros(&[w.shape()[1]]))
}

pub fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (n, _) = t.dims2().unwrap();
    (0..n).map(|i| t.row(i).iter().map(|&v| v as f64).collect()).collect()
}

pub fn rope_rows(x: &[Vec<f64>], pos: &[Position], lo: usize, dh: usize) -> Vec<Vec<f64>> {
    let pairs = dh / 2;
    let sp = pairs / 3;
    let groups = [pairs - 2 * sp, sp, sp];
    x.iter()
        .zip(pos)
        .map(|(r, p)| {
            let mut out = r[lo..lo + dh].to_vec();
            let mut k = 0;
            for (axis, &n) in groups.iter().enumerate() {
                for j in 0..n {
                    let th = p[axis] as f64 * 10_000f64.powf(-(j as f64) / n as f64);
                    let (a, b) = (out[2 * k], out[2 * k + 1]);
                    out[2 * k] = a * th.cos() - b * th.sin();
                    out[2 * k + 1] = a * th.sin() + b * th.cos();
                    k += 1;
                }
            }
            out
        })
        .collect()
}

/// Dense multi-head attention in f64.
pub fn dense_attention(
    xq: &[Vec<f64>],
    xkv: &[Vec<f64>],
    ws: &[Tensor; 4],
    heads: usize,
    pos: Option<(&[Position], &[Position])>,
) -> Vec<Vec<f64>> {
    let (q, k, v) = (mm(xq, &ws[0]), mm(xkv, &ws[1]), mm(xkv, &ws[2]));
    let d = ws[0].shape()[0];
    let dh = d / heads;
    let mut concat = vec![vec![0.0; d]; xq.len()];
    for h in 0..heads {
        let (qh, kh) = match pos {
            Some((qp, kp)) => (rope_rows(&q, qp, h * dh, dh), rope_rows(&k, kp, h * dh, dh)),
            None => (
                q.iter().map(|r| r[h * dh..(h + 1) * dh].to_vec()).collect(),
                k.iter().map(|r| r[h * dh..(h + 1) * dh].to_vec()).collect::<Vec<_>>(),
            ),
        };
        for (i, qi) in qh.iter().enumerate() {
            let s: Vec<f64> = kh
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                concat[i][h * dh + c] = e.iter().zip(&v).map(|(a, vr)| a / z * vr[h * dh + c]).sum();
            }
        }
    }
    mm(&concat, &ws[3])
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Sweeps every inner bin boundary with floating-point class statistics
/// over bin centres and keeps the first maximiser.
pub fn otsu_oracle(values: &[f32]) -> Vec<f32> {
    let lo = values.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if lo == hi {
        return vec![0.0; values.len()];
    }
    let bins: Vec<usize> = values.iter().map(|&v| histogram_bin(v, lo, hi)).collect();
    let n = values.len() as f64;
    let mut best = (f64::NEG_INFINITY, 0);
    for k in 1..OTSU_BINS {
        let lower: Vec<f64> = bins.iter().filter(|&&b| b < k).map(|&b| b as f64 + 0.5).collect();
        let upper: Vec<f64> = bins.iter().filter(|&&b| b >= k).map(|&b| b as f64 + 0.5).collect();
        if lower.is_empty() || upper.is_empty() {
            continue;
        }
        let m0 = lower.iter().sum::<f64>() / lower.len() as f64;
        let m1 = upper.iter().sum::<f64>() / upper.len() as f64;
        let var = lower.len() as f64 / n * upper.len() as f64 / n * (m0 - m1).powi(2);
        if var > best.0 + 1e-12 {
            best = (var, k);
        }
    }
    bins.iter().map(|&b| if b >= best.1 { 1.0 } else { 0.0 }).collect()
}

pub fn random_mask(rng: &mut Rng, n: usize, p: f64) -> AttnMask {
    AttnMask::new((0..n).map(|_| if rng.bernoulli(p) { 1.0 } else { 0.0 }).collect(), 1)
}

/// Softmax rows in f64, then `(1 - M_src)` on the key axis, then `A V`.
pub fn shared_attention_oracle(q: &[Tensor], k: &[Tensor], v: &[Tensor], m: &AttnMask, renorm: bool) -> Vec<Vec<f64>> {
    let (n, dh) = q[0].dims2().unwrap();
    let n_src = k[0].shape()[0];
    let mut out = vec![vec![0.0; dh * q.len()]; n];
    for h in 0..q.len() {
        for i in 0..n {
            let s: Vec<f64> = (0..n_src).map(|j| dot(q[h].row(i), k[h].row(j)) / (dh as f64).sqrt()).collect();
            let w: Vec<f64> = if renorm {
                let keep: Vec<usize> = (0..n_src).filter(|&j| !m.get(j)).collect();
                let mx = keep.iter().map(|&j| s[j]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = keep.iter().map(|&j| (s[j] - mx).exp()).sum();
                (0..n_src).map(|j| if m.get(j) { 0.0 } else { (s[j] - mx).exp() / z }).collect()
            } else {
                let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|x| (x - mx).exp()).sum();
                (0..n_src).map(|j| (s[j] - mx).exp() / z * (1.0 - m.values.data()[j] as f64)).collect()
            };
            for c in 0..dh {
                out[i][h * dh + c] = (0..n_src).map(|j| w[j] * v[h].get2(j, c) as f64).sum();
            }
        }
    }
    out
}

/// Mean over subject rows and heads of the scaled text-to-video logits.
pub fn subject_map_oracle(q: &[Tensor], k: &[Tensor], subject: &[usize]) -> Vec<f64> {
    let (n_vid, dh) = k[0].dims2().unwrap();
    (0..n_vid)
        .map(|j| {
            let mut s = 0.0;
            for h in 0..q.len() {
                for &i in subject {
                    s += dot(q[h].row(i), k[h].row(j)) / (dh as f64).sqrt();
                }
            }
            s / (q.len() * subject.len()) as f64
        })
        .collect()
}

/// Row-wise softmax in f64.
pub fn softmax_oracle(x: &Tensor) -> Vec<Vec<f64>> {
    to_rows(x)
        .iter()
        .map(|r| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|v| v / z).collect()
        })
        .collect()
}
