//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation evaluates eagerly and appends a node recording its
//! inputs. [`Tape::backward`] walks the nodes in reverse creation order,
//! which is a valid topological order because inputs always precede
//! their consumers. Gradients accumulate in `f64`.

use std::sync::Arc;

use crate::error::{shape_err, Error, Result};

use super::kernels::{self, Position, RopeLayout};
use super::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddRow(Var, Var),
    Softmax(Var),
    RmsNorm { x: Var, gain: Var, inv: Vec<f64> },
    Rope { x: Var, positions: Arc<[Position]>, layout: RopeLayout },
    Gelu(Var),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Gather { x: Var, index: Arc<[usize]> },
    Sum(Var),
    MeanRows(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`]: one optional gradient per node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(
            Tensor::new(
                self.shapes[v.0].clone(),
                g.iter().map(|&x| x as f32).collect(),
            )
            .expect("gradient matches node shape"),
        )
    }

    /// Gradient of `v`, or zeros of its shape when none reached it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Accumulates the gradient for `v` into `target.grad`.
    pub fn absorb(&self, v: Var, target: &mut Tensor) -> Result<()> {
        if !target.requires_grad {
            return Ok(());
        }
        let g = self.get_or_zeros(v);
        if g.shape() != target.shape() {
            return Err(shape_err!(
                "gradient {:?} does not fit tensor {:?}",
                g.shape(),
                target.shape()
            ));
        }
        match target.grad.as_mut() {
            Some(acc) => acc.iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
            None => target.grad = Some(g.into_data()),
        }
        Ok(())
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Registers a leaf; it is differentiable iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let ng = t.requires_grad;
        self.push(t, Op::Leaf, ng)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::matmul(self.value(a), self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(y, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let y = kernels::transpose(self.value(a))?;
        let ng = self.needs(&[a]);
        Ok(self.push(y, Op::Transpose(a), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(y, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(y, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(y, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, k: f32) -> Var {
        let y = self.value(a).scale(k);
        let ng = self.needs(&[a]);
        self.push(y, Op::Scale(a, k), ng)
    }

    /// `a[n×d] + b[d]` with `b` repeated on every row.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = self.value(a).dims2()?;
        if self.shape(b) != [d] {
            return Err(shape_err!(
                "row bias {:?} does not match {:?}",
                self.shape(b),
                self.shape(a)
            ));
        }
        let bd = self.value(b).data().to_vec();
        let mut y = self.value(a).data().to_vec();
        for i in 0..n {
            y[i * d..(i + 1) * d]
                .iter_mut()
                .zip(&bd)
                .for_each(|(x, b)| *x += b);
        }
        let ng = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![n, d], y)?, Op::AddRow(a, b), ng))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let y = kernels::softmax_rows(self.value(a))?;
        let ng = self.needs(&[a]);
        Ok(self.push(y, Op::Softmax(a), ng))
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let y = kernels::rms_norm(self.value(x), self.value(gain))?;
        let inv = kernels::inv_rms_rows(self.value(x))?;
        let ng = self.needs(&[x, gain]);
        Ok(self.push(y, Op::RmsNorm { x, gain, inv }, ng))
    }

    pub fn rope(&mut self, x: Var, positions: Arc<[Position]>) -> Result<Var> {
        let (_, d) = self.value(x).dims2()?;
        let layout = RopeLayout::for_dim(d)?;
        let y = kernels::rope_rotate(self.value(x), &positions, &layout, 1.0)?;
        let ng = self.needs(&[x]);
        Ok(self.push(
            y,
            Op::Rope {
                x,
                positions,
                layout,
            },
            ng,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let y = kernels::gelu(self.value(x));
        let ng = self.needs(&[x]);
        self.push(y, Op::Gelu(x), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if start + len > n {
            return Err(shape_err!("row slice {start}..{} out of {n}", start + len));
        }
        let y = Tensor::new(
            vec![len, d],
            self.value(x).data()[start * d..(start + len) * d].to_vec(),
        )?;
        let ng = self.needs(&[x]);
        Ok(self.push(y, Op::SliceRows { x, start }, ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if start + len > d {
            return Err(shape_err!("column slice {start}..{} out of {d}", start + len));
        }
        let src = self.value(x).data();
        let mut y = Vec::with_capacity(n * len);
        for i in 0..n {
            y.extend_from_slice(&src[i * d + start..i * d + start + len]);
        }
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![n, len], y)?, Op::SliceCols { x, start }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = self.value(parts[0]).dims2()?.1;
        let mut rows = 0;
        let mut y = Vec::new();
        for &p in parts {
            let (n, dp) = self.value(p).dims2()?;
            if dp != d {
                return Err(shape_err!("concat_rows width {dp} vs {d}"));
            }
            rows += n;
            y.extend_from_slice(self.value(p).data());
        }
        let ng = self.needs(parts);
        Ok(self.push(
            Tensor::new(vec![rows, d], y)?,
            Op::ConcatRows(parts.to_vec()),
            ng,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (np, dp) = self.value(p).dims2()?;
            if np != n {
                return Err(shape_err!("concat_cols height {np} vs {n}"));
            }
            widths.push(dp);
        }
        let total: usize = widths.iter().sum();
        let mut y = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                y.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let ng = self.needs(parts);
        Ok(self.push(
            Tensor::new(vec![n, total], y)?,
            Op::ConcatCols(parts.to_vec()),
            ng,
        ))
    }

    /// `out[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, shape: Vec<usize>) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(shape_err!("gather index {bad} out of {}", src.len()));
        }
        let y = Tensor::new(shape, index.iter().map(|&i| src[i]).collect())?;
        let ng = self.needs(&[x]);
        Ok(self.push(y, Op::Gather { x, index }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum() as f32;
        let ng = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Column means of a matrix, as a vector of its width.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        let mut acc = vec![0.0f64; d];
        for i in 0..n {
            for (a, &v) in acc.iter_mut().zip(self.value(x).row(i)) {
                *a += v as f64;
            }
        }
        let y = Tensor::new(vec![d], acc.iter().map(|a| (a / n as f64) as f32).collect())?;
        let ng = self.needs(&[x]);
        Ok(self.push(y, Op::MeanRows(x), ng))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &gy, &mut grads)?;
            grads[idx] = Some(gy);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        // Only leaves that asked for gradients report them.
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !(matches!(n.op, Op::Leaf) && n.needs_grad) {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2()?;
                let p = val(*b).dims2()?.1;
                if wants(*a) {
                    let bd = val(*b).data();
                    let mut ga = vec![0.0f64; m * k];
                    for i in 0..m {
                        for t in 0..k {
                            let brow = &bd[t * p..(t + 1) * p];
                            ga[i * k + t] = gy[i * p..(i + 1) * p]
                                .iter()
                                .zip(brow)
                                .map(|(g, &b)| g * b as f64)
                                .sum();
                        }
                    }
                    add_into(&mut grads[a.0], &ga);
                }
                if wants(*b) {
                    let ad = val(*a).data();
                    let mut gb = vec![0.0f64; k * p];
                    for i in 0..m {
                        for t in 0..k {
                            let av = ad[i * k + t] as f64;
                            if av == 0.0 {
                                continue;
                            }
                            for (g, &gyv) in gb[t * p..(t + 1) * p]
                                .iter_mut()
                                .zip(&gy[i * p..(i + 1) * p])
                            {
                                *g += av * gyv;
                            }
                        }
                    }
                    add_into(&mut grads[b.0], &gb);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = val(*a).dims2()?;
                let mut g = vec![0.0f64; m * n];
                for i in 0..m {
                    for j in 0..n {
                        g[i * n + j] = gy[j * m + i];
                    }
                }
                add_into(&mut grads[a.0], &g);
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    add_into(&mut grads[a.0], gy);
                }
                if wants(*b) {
                    add_into(&mut grads[b.0], gy);
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    add_into(&mut grads[a.0], gy);
                }
                if wants(*b) {
                    let neg: Vec<f64> = gy.iter().map(|g| -g).collect();
                    add_into(&mut grads[b.0], &neg);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let g: Vec<f64> = gy
                        .iter()
                        .zip(val(*b).data())
                        .map(|(g, &b)| g * b as f64)
                        .collect();
                    add_into(&mut grads[a.0], &g);
                }
                if wants(*b) {
                    let g: Vec<f64> = gy
                        .iter()
                        .zip(val(*a).data())
                        .map(|(g, &a)| g * a as f64)
                        .collect();
                    add_into(&mut grads[b.0], &g);
                }
            }
            Op::Scale(a, k) => {
                let g: Vec<f64> = gy.iter().map(|g| g * *k as f64).collect();
                add_into(&mut grads[a.0], &g);
            }
            Op::AddRow(a, b) => {
                if wants(*a) {
                    add_into(&mut grads[a.0], gy);
                }
                if wants(*b) {
                    let (n, d) = val(*a).dims2()?;
                    let mut g = vec![0.0f64; d];
                    for i in 0..n {
                        g.iter_mut()
                            .zip(&gy[i * d..(i + 1) * d])
                            .for_each(|(a, b)| *a += b);
                    }
                    add_into(&mut grads[b.0], &g);
                }
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let (m, n) = y.dims2()?;
                let mut g = vec![0.0f64; m * n];
                for i in 0..m {
                    let yr = y.row(i);
                    let gr = &gy[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(&y, g)| y as f64 * g).sum();
                    for j in 0..n {
                        g[i * n + j] = yr[j] as f64 * (gr[j] - dot);
                    }
                }
                add_into(&mut grads[a.0], &g);
            }
            Op::RmsNorm { x, gain, inv } => {
                let xv = val(*x);
                let gv = val(*gain).data();
                let (m, n) = xv.dims2()?;
                if wants(*x) {
                    let mut g = vec![0.0f64; m * n];
                    for i in 0..m {
                        let xr = xv.row(i);
                        let gr = &gy[i * n..(i + 1) * n];
                        let r = inv[i];
                        let dot: f64 = (0..n).map(|j| gr[j] * gv[j] as f64 * xr[j] as f64).sum();
                        for j in 0..n {
                            g[i * n + j] = r * gv[j] as f64 * gr[j]
                                - xr[j] as f64 * r * r * r * dot / n as f64;
                        }
                    }
                    add_into(&mut grads[x.0], &g);
                }
                if wants(*gain) {
                    let mut g = vec![0.0f64; n];
                    for i in 0..m {
                        let xr = xv.row(i);
                        for j in 0..n {
                            g[j] += gy[i * n + j] * xr[j] as f64 * inv[i];
                        }
                    }
                    add_into(&mut grads[gain.0], &g);
                }
            }
            Op::Rope {
                x,
                positions,
                layout,
            } => {
                let n = positions.len();
                let d = layout.dim;
                let mut g = gy.to_vec();
                for (i, &pos) in positions.iter().enumerate() {
                    let row = &mut g[i * d..(i + 1) * d];
                    for (p, theta) in layout.angles(pos).into_iter().enumerate() {
                        let (s, c) = (-theta).sin_cos();
                        let (a, b) = (row[2 * p], row[2 * p + 1]);
                        row[2 * p] = a * c - b * s;
                        row[2 * p + 1] = a * s + b * c;
                    }
                }
                debug_assert_eq!(g.len(), n * d);
                add_into(&mut grads[x.0], &g);
            }
            Op::Gelu(x) => {
                let g: Vec<f64> = gy
                    .iter()
                    .zip(val(*x).data())
                    .map(|(g, &x)| g * kernels::gelu_grad_scalar(x as f64))
                    .collect();
                add_into(&mut grads[x.0], &g);
            }
            Op::SliceRows { x, start } => {
                let (n, d) = val(*x).dims2()?;
                let mut g = vec![0.0f64; n * d];
                g[start * d..start * d + gy.len()].copy_from_slice(gy);
                add_into(&mut grads[x.0], &g);
            }
            Op::SliceCols { x, start } => {
                let (n, d) = val(*x).dims2()?;
                let len = gy.len() / n;
                let mut g = vec![0.0f64; n * d];
                for i in 0..n {
                    g[i * d + start..i * d + start + len]
                        .copy_from_slice(&gy[i * len..(i + 1) * len]);
                }
                add_into(&mut grads[x.0], &g);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = val(*p).len();
                    if wants(*p) {
                        add_into(&mut grads[p.0], &gy[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (n, total) = node.value.dims2()?;
                let mut col = 0;
                for p in parts {
                    let w = val(*p).dims2()?.1;
                    if wants(*p) {
                        let mut g = Vec::with_capacity(n * w);
                        for i in 0..n {
                            g.extend_from_slice(&gy[i * total + col..i * total + col + w]);
                        }
                        add_into(&mut grads[p.0], &g);
                    }
                    col += w;
                }
            }
            Op::Gather { x, index } => {
                let mut g = vec![0.0f64; val(*x).len()];
                for (o, &i) in index.iter().enumerate() {
                    g[i] += gy[o];
                }
                add_into(&mut grads[x.0], &g);
            }
            Op::Sum(x) => {
                let g = vec![gy[0]; val(*x).len()];
                add_into(&mut grads[x.0], &g);
            }
            Op::MeanRows(x) => {
                let (n, d) = val(*x).dims2()?;
                let mut g = vec![0.0f64; n * d];
                for i in 0..n {
                    for j in 0..d {
                        g[i * d + j] = gy[j] / n as f64;
                    }
                }
                add_into(&mut grads[x.0], &g);
            }
        }
        Ok(())
    }
}
