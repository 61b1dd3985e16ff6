//! Observation and intervention points inside the transformer blocks,
//! used by inference-time KV-sharing.

use crate::error::Result;
use crate::numerics::Tensor;

/// Video-token self-attention internals of one layer. Per-head tensors
/// are `n_vid × d_head`; queries and keys are already rotated.
pub struct SelfAttnView<'a> {
    /// 1-based layer index.
    pub layer: usize,
    pub q: &'a [Tensor],
    pub k: &'a [Tensor],
    pub v: &'a [Tensor],
    /// Concatenated head outputs for the video rows, before the output
    /// projection (`n_vid × d`).
    pub out: &'a Tensor,
}

/// Cross-attention projections exposing text-to-video logits: caption
/// tokens through the query projection, video tokens through the key
/// projection, per head.
pub struct CrossAttnView<'a> {
    pub layer: usize,
    pub q_text: &'a [Tensor],
    pub k_vid: &'a [Tensor],
}

pub trait AttentionHook {
    /// Whether views should be built at all; `false` keeps the forward
    /// pass identical to a hook-free one.
    fn active(&self) -> bool {
        false
    }

    /// Called before each forward pass with the 1-based timestep index,
    /// which counts down from `steps` to 1.
    fn begin_pass(&mut self, _timestep: usize, _steps: usize) -> Result<()> {
        Ok(())
    }

    /// May return replacement head outputs for the video rows.
    fn self_attention(&mut self, _view: SelfAttnView<'_>) -> Result<Option<Tensor>> {
        Ok(None)
    }

    fn cross_attention(&mut self, _view: CrossAttnView<'_>) -> Result<()> {
        Ok(())
    }
}

/// The hook that does nothing.
pub struct NoHook;

impl AttentionHook for NoHook {}
