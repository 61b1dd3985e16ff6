pub mod eval;
pub mod gen_data;
pub mod generate;
pub mod inspect;
pub mod sweep;
pub mod train;

use posegen_core::codec::{Codec, CodecConfig};
use posegen_core::dit::DitConfig;
use posegen_core::Result;

/// The codec a model works with: its channels and mask slots fix the
/// latent channels and temporal stride.
pub fn codec_for(cfg: &DitConfig) -> Result<Codec> {
    Codec::new(CodecConfig {
        channels: cfg.channels,
        temporal_stride: cfg.mask_slots,
        ..Default::default()
    })
}
