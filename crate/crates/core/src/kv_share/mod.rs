//! Background key/value sharing between long-video segments.
//!
//! A subject mask is derived per layer by thresholding text-to-video
//! cross-attention logits of the subject words. During the source segment
//! the self-attention keys and values of video tokens are cached at gated
//! `(layer, timestep)` pairs; later segments attend to them with the source
//! subject suppressed and keep the result only where neither segment shows
//! the subject.

mod attend;
mod cache;
mod hook;
mod mask;

pub use attend::{fuse, shared_attention, SuppressMode};
pub use cache::{parse_gate_spec, Gate, KvCache, KvEntry};
pub use hook::{Counters, ShareSettings, SharingHook};
pub use mask::{
    histogram_bin, layer_mask, otsu_threshold, subject_attn_map, threshold_map, AttnMask, Otsu, OTSU_BINS,
};
