//! Pose-conditioned video diffusion at desk scale.
//!
//! A small diffusion transformer conditioned on motion (channel
//! concatenation of pose, hand and frame-mask latents) and appearance
//! (reference-image tokens sharing the self-attention sequence), trained
//! with LoRA adapters on a procedural stick-figure world. Long videos are
//! produced by interleaving independently generated key segments with
//! interpolating stitch segments, keeping backgrounds consistent by
//! reusing self-attention keys and values from a source segment.

pub mod checkpoint;
pub mod codec;
pub mod dit;
pub mod error;
pub mod kv_share;
pub mod long_video;
pub mod metrics;
pub mod numerics;
pub mod ppm;
pub mod sampler;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
