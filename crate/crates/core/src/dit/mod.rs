//! Diffusion transformer with channel-level motion conditioning,
//! token-level reference injection and low-rank adapters.

pub mod attention;
mod config;
pub mod hook;
mod lora;
mod model;
pub mod params;
pub mod patch;

pub use config::{DitConfig, ImageShift, PatchMode};
pub use hook::{AttentionHook, CrossAttnView, NoHook, SelfAttnView};
pub use lora::lora_merge;
pub use model::{time_features, ConditionBundle, DitModel, ForwardOptions, Tokens};
pub use params::{Group, ParamId, ParamStore};
