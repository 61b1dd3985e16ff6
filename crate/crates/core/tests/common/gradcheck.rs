//! Random computation graphs evaluated two ways: on the autodiff tape in
//! `f32`, and by an independent `f64` reference interpreter used for
//! central finite differences.

use std::sync::Arc;

use posegen_core::numerics::{Position, Rng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub enum Step {
    MatMul,
    MatMulTransposed,
    AddRow,
    Softmax,
    RmsNorm,
    Rope,
    Gelu,
    MulInput,
    AddInput,
    SubInput,
    Scale(f32),
    SwapRowHalves,
    SwapColHalves,
    Permute,
    AddColumnMeans,
}

pub const ALL_STEPS: usize = 15;

fn step_by_index(i: usize, rng: &mut Rng) -> Step {
    match i % ALL_STEPS {
        0 => Step::MatMul,
        1 => Step::MatMulTransposed,
        2 => Step::AddRow,
        3 => Step::Softmax,
        4 => Step::RmsNorm,
        5 => Step::Rope,
        6 => Step::Gelu,
        7 => Step::MulInput,
        8 => Step::AddInput,
        9 => Step::SubInput,
        10 => Step::Scale(rng.uniform_in(-1.5, 1.5)),
        11 => Step::SwapRowHalves,
        12 => Step::SwapColHalves,
        13 => Step::Permute,
        _ => Step::AddColumnMeans,
    }
}

pub struct Graph {
    pub n: usize,
    pub d: usize,
    pub steps: Vec<Step>,
    pub x: Tensor,
    pub w: Tensor,
    pub gain: Tensor,
    pub bias: Tensor,
    pub readout: Tensor,
    pub positions: Vec<Position>,
    pub perm: Vec<usize>,
}

impl Graph {
    /// Graph `k` of a family; step `k mod 15` is always included so any
    /// 15 consecutive graphs cover every primitive.
    pub fn random(k: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed).split(k as u64);
        let n = 2 + rng.below(4);
        let d = [6, 8, 12][rng.below(3)];
        let len = 4 + rng.below(5);
        let mut steps: Vec<Step> = (0..len)
            .map(|_| {
                let i = rng.below(ALL_STEPS);
                step_by_index(i, &mut rng)
            })
            .collect();
        let forced = step_by_index(k, &mut rng);
        let at = rng.below(steps.len() + 1);
        steps.insert(at, forced);
        let positions = (0..n)
            .map(|_| {
                [
                    rng.below(5) as i32,
                    rng.below(5) as i32,
                    rng.below(9) as i32,
                ]
            })
            .collect();
        let mut perm: Vec<usize> = (0..n * d).collect();
        for i in (1..perm.len()).rev() {
            let j = rng.below(i + 1);
            perm.swap(i, j);
        }
        Self {
            n,
            d,
            steps,
            x: rng.normal_tensor(&[n, d], 1.0),
            w: rng.normal_tensor(&[d, d], 0.5),
            gain: rng.uniform_tensor(&[d], 0.5, 1.5),
            bias: rng.normal_tensor(&[d], 0.5),
            readout: rng.normal_tensor(&[n, d], 1.0),
            positions,
            perm,
        }
    }

    pub fn leaves(&self) -> [&Tensor; 4] {
        [&self.x, &self.w, &self.gain, &self.bias]
    }

    /// Loss and gradients for the four leaves via the tape.
    pub fn autodiff(&self) -> (f32, Vec<Tensor>) {
        let mut tape = Tape::new();
        let x = tape.leaf(self.x.clone().with_grad());
        let w = tape.leaf(self.w.clone().with_grad());
        let g = tape.leaf(self.gain.clone().with_grad());
        let b = tape.leaf(self.bias.clone().with_grad());
        let pos: Arc<[Position]> = self.positions.clone().into();
        let perm: Arc<[usize]> = self.perm.clone().into();
        let (n, d) = (self.n, self.d);
        let mut h = x;
        for step in &self.steps {
            h = match *step {
                Step::MatMul => tape.matmul(h, w).unwrap(),
                Step::MatMulTransposed => {
                    let wt = tape.transpose(w).unwrap();
                    let ht = tape.transpose(h).unwrap();
                    let p = tape.matmul(wt, ht).unwrap();
                    tape.transpose(p).unwrap()
                }
                Step::AddRow => tape.add_row(h, b).unwrap(),
                Step::Softmax => tape.softmax_rows(h).unwrap(),
                Step::RmsNorm => tape.rms_norm(h, g).unwrap(),
                Step::Rope => tape.rope(h, pos.clone()).unwrap(),
                Step::Gelu => tape.gelu(h),
                Step::MulInput => tape.mul(h, x).unwrap(),
                Step::AddInput => tape.add(h, x).unwrap(),
                Step::SubInput => tape.sub(h, x).unwrap(),
                Step::Scale(k) => tape.scale(h, k),
                Step::SwapRowHalves => {
                    let top = n / 2;
                    let a = tape.slice_rows(h, 0, top).unwrap();
                    let z = tape.slice_rows(h, top, n - top).unwrap();
                    tape.concat_rows(&[z, a]).unwrap()
                }
                Step::SwapColHalves => {
                    let left = d / 2;
                    let a = tape.slice_cols(h, 0, left).unwrap();
                    let z = tape.slice_cols(h, left, d - left).unwrap();
                    tape.concat_cols(&[z, a]).unwrap()
                }
                Step::Permute => tape.gather(h, perm.clone(), vec![n, d]).unwrap(),
                Step::AddColumnMeans => {
                    let m = tape.mean_rows(h).unwrap();
                    tape.add_row(h, m).unwrap()
                }
            };
        }
        let r = tape.constant(self.readout.clone());
        let hr = tape.mul(h, r).unwrap();
        let loss = tape.sum(hr);
        let grads = tape.backward(loss).unwrap();
        let out: Vec<Tensor> = [x, w, g, b].iter().map(|&v: &Var| grads.get_or_zeros(v)).collect();
        (tape.value(loss).data()[0], out)
    }

    /// Loss evaluated entirely in `f64` from the given leaf values.
    pub fn reference_loss(&self, leaves: &[Vec<f64>; 4]) -> f64 {
        let (n, d) = (self.n, self.d);
        let [x, w, gain, bias] = leaves;
        let mut h = x.clone();
        for step in &self.steps {
            h = match *step {
                Step::MatMul | Step::MatMulTransposed => ref_matmul(&h, w, n, d, d),
                Step::AddRow => add_row(&h, bias, n, d),
                Step::Softmax => {
                    let mut out = h.clone();
                    for i in 0..n {
                        let row = &h[i * d..(i + 1) * d];
                        let z: f64 = row.iter().map(|v| v.exp()).sum();
                        for j in 0..d {
                            out[i * d + j] = row[j].exp() / z;
                        }
                    }
                    out
                }
                Step::RmsNorm => {
                    let mut out = h.clone();
                    for i in 0..n {
                        let row = &h[i * d..(i + 1) * d];
                        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
                        let r = 1.0 / (ms + 1e-6).sqrt();
                        for j in 0..d {
                            out[i * d + j] = row[j] * r * gain[j];
                        }
                    }
                    out
                }
                Step::Rope => ref_rope(&h, &self.positions, d),
                Step::Gelu => h
                    .iter()
                    .map(|&v| {
                        0.5 * v
                            * (1.0
                                + ((2.0 / std::f64::consts::PI).sqrt()
                                    * (v + 0.044715 * v.powi(3)))
                                .tanh())
                    })
                    .collect(),
                Step::MulInput => h.iter().zip(x).map(|(a, b)| a * b).collect(),
                Step::AddInput => h.iter().zip(x).map(|(a, b)| a + b).collect(),
                Step::SubInput => h.iter().zip(x).map(|(a, b)| a - b).collect(),
                Step::Scale(k) => h.iter().map(|a| a * k as f64).collect(),
                Step::SwapRowHalves => {
                    let top = n / 2;
                    let mut out = h[top * d..].to_vec();
                    out.extend_from_slice(&h[..top * d]);
                    out
                }
                Step::SwapColHalves => {
                    let left = d / 2;
                    let mut out = Vec::with_capacity(n * d);
                    for i in 0..n {
                        out.extend_from_slice(&h[i * d + left..(i + 1) * d]);
                        out.extend_from_slice(&h[i * d..i * d + left]);
                    }
                    out
                }
                Step::Permute => self.perm.iter().map(|&i| h[i]).collect(),
                Step::AddColumnMeans => {
                    let means: Vec<f64> = (0..d)
                        .map(|j| (0..n).map(|i| h[i * d + j]).sum::<f64>() / n as f64)
                        .collect();
                    add_row(&h, &means, n, d)
                }
            };
        }
        h.iter()
            .zip(self.readout.data())
            .map(|(a, &r)| a * r as f64)
            .sum()
    }

    /// Central finite-difference gradients of the reference loss.
    pub fn finite_differences(&self, h: f64) -> Vec<Vec<f64>> {
        let base: [Vec<f64>; 4] = self
            .leaves()
            .map(|t| t.data().iter().map(|&v| v as f64).collect());
        (0..4)
            .map(|li| {
                (0..base[li].len())
                    .map(|e| {
                        let mut plus = base.clone();
                        let mut minus = base.clone();
                        plus[li][e] += h;
                        minus[li][e] -= h;
                        (self.reference_loss(&plus) - self.reference_loss(&minus)) / (2.0 * h)
                    })
                    .collect()
            })
            .collect()
    }

    /// Largest relative gradient error, with magnitudes below `floor`
    /// compared on an absolute scale of `floor`.
    pub fn max_relative_error(&self, h: f64, floor: f64) -> f64 {
        let (_, ad) = self.autodiff();
        let fd = self.finite_differences(h);
        let mut worst = 0.0f64;
        for (a, f) in ad.iter().zip(&fd) {
            for (&av, &fv) in a.data().iter().zip(f) {
                let denom = (av as f64).abs().max(fv.abs()).max(floor);
                worst = worst.max((av as f64 - fv).abs() / denom);
            }
        }
        worst
    }
}

fn ref_matmul(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        for j in 0..p {
            for t in 0..k {
                out[i * p + j] += a[i * k + t] * b[t * p + j];
            }
        }
    }
    out
}

fn add_row(h: &[f64], b: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut out = h.to_vec();
    for i in 0..n {
        for j in 0..d {
            out[i * d + j] += b[j];
        }
    }
    out
}

fn ref_rope(h: &[f64], positions: &[Position], d: usize) -> Vec<f64> {
    let pairs = d / 2;
    let spatial = pairs / 3;
    let groups = [pairs - 2 * spatial, spatial, spatial];
    let mut out = h.to_vec();
    for (i, pos) in positions.iter().enumerate() {
        let mut p = 0;
        for (axis, &cnt) in groups.iter().enumerate() {
            for j in 0..cnt {
                let theta = pos[axis] as f64 * 10_000f64.powf(-(j as f64) / cnt as f64);
                let (s, c) = theta.sin_cos();
                let (a, b) = (h[i * d + 2 * p], h[i * d + 2 * p + 1]);
                out[i * d + 2 * p] = a * c - b * s;
                out[i * d + 2 * p + 1] = a * s + b * c;
                p += 1;
            }
        }
    }
    out
}
