use std::sync::Arc;

use crate::error::Result;
use crate::numerics::{Position, Tape, Tensor, Var};

use super::params::{linear, AttnW};

/// Per-head projections and the concatenated head outputs, before the
/// output projection.
pub struct Heads {
    pub concat: Var,
    pub q: Vec<Var>,
    pub k: Vec<Var>,
    pub v: Vec<Var>,
}

/// Scaled dot-product attention split into `heads` column groups. Rotary
/// embeddings are applied to queries and keys when positions are given.
pub fn multi_head(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    rope: Option<(&Arc<[Position]>, &Arc<[Position]>)>,
) -> Result<Heads> {
    let d = tape.shape(q)[1];
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut out = Heads {
        concat: q,
        q: Vec::with_capacity(heads),
        k: Vec::with_capacity(heads),
        v: Vec::with_capacity(heads),
    };
    let mut parts = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut qh = tape.slice_cols(q, h * dh, dh)?;
        let mut kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        if let Some((qp, kp)) = rope {
            qh = tape.rope(qh, qp.clone())?;
            kh = tape.rope(kh, kp.clone())?;
        }
        let kt = tape.transpose(kh)?;
        let s = tape.matmul(qh, kt)?;
        let s = tape.scale(s, scale);
        let a = tape.softmax_rows(s)?;
        parts.push(tape.matmul(a, vh)?);
        out.q.push(qh);
        out.k.push(kh);
        out.v.push(vh);
    }
    out.concat = tape.concat_cols(&parts)?;
    Ok(out)
}

/// Full self-attention over a token sequence, every token rotated by its
/// own grid position. Returns the projected output and the head internals.
pub fn self_attention(
    tape: &mut Tape,
    x: Var,
    positions: &Arc<[Position]>,
    w: &AttnW<Var>,
    heads: usize,
    lora: Option<f32>,
) -> Result<(Var, Heads)> {
    let q = linear(tape, x, &w.q, lora)?;
    let k = linear(tape, x, &w.k, lora)?;
    let v = linear(tape, x, &w.v, lora)?;
    let hs = multi_head(tape, q, k, v, heads, Some((positions, positions)))?;
    let out = linear(tape, hs.concat, &w.o, lora)?;
    Ok((out, hs))
}

/// Video queries attending to context keys and values.
pub fn cross_attention(
    tape: &mut Tape,
    x: Var,
    ctx: Var,
    w: &AttnW<Var>,
    heads: usize,
    lora: Option<f32>,
) -> Result<(Var, Heads)> {
    let q = linear(tape, x, &w.q, lora)?;
    let k = linear(tape, ctx, &w.k, lora)?;
    let v = linear(tape, ctx, &w.v, lora)?;
    let hs = multi_head(tape, q, k, v, heads, None)?;
    let out = linear(tape, hs.concat, &w.o, lora)?;
    Ok((out, hs))
}

/// Splits a matrix into per-head column blocks.
pub fn split_heads(x: &Tensor, heads: usize) -> Vec<Tensor> {
    let (n, d) = x.dims2().expect("matrix");
    let dh = d / heads;
    (0..heads)
        .map(|h| {
            let mut v = Vec::with_capacity(n * dh);
            for i in 0..n {
                v.extend_from_slice(&x.row(i)[h * dh..(h + 1) * dh]);
            }
            Tensor::new(vec![n, dh], v).expect("head block")
        })
        .collect()
}
