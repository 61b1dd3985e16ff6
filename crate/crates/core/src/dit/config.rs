use crate::error::{config_err, Result};
use crate::numerics::RopeLayout;

/// How the motion conditions enter the video patchifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatchMode {
    /// `[z_vid; m; z_pose]` through one patchifier, `z_hand` through its
    /// own patchifier and a zero-initialised projection, summed.
    Split,
    /// All four inputs concatenated into a single patchifier.
    Literal,
}

/// Where reference-image tokens sit on the position grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageShift {
    /// Temporal index 0, width index offset by the patch-grid width.
    Width,
    /// Temporal index one past the last latent frame.
    Temporal,
}

impl std::str::FromStr for PatchMode {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "split" => Ok(Self::Split),
            "literal" => Ok(Self::Literal),
            _ => Err(config_err!("patch mode must be split or literal, got {s:?}")),
        }
    }
}

impl std::fmt::Display for PatchMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Split => "split",
            Self::Literal => "literal",
        })
    }
}

impl std::str::FromStr for ImageShift {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "width" => Ok(Self::Width),
            "temporal" => Ok(Self::Temporal),
            _ => Err(config_err!("image shift must be width or temporal, got {s:?}")),
        }
    }
}

impl std::fmt::Display for ImageShift {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Width => "width",
            Self::Temporal => "temporal",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DitConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    /// Latent channels `c`.
    pub channels: usize,
    /// Frame-mask slots per latent frame (the codec's temporal stride).
    pub mask_slots: usize,
    pub text_dim: usize,
    pub vocab: usize,
    pub lora_rank: usize,
    pub lora_alpha: f32,
    pub patch_mode: PatchMode,
    pub image_shift: ImageShift,
    /// Seeds the frozen base weights and the pretrained video patchifier.
    pub base_seed: u64,
    /// Seeds the newly introduced adapter and patchifier parameters.
    pub adapter_seed: u64,
}

impl Default for DitConfig {
    fn default() -> Self {
        Self {
            layers: 8,
            dim: 64,
            heads: 4,
            channels: 8,
            mask_slots: 4,
            text_dim: 16,
            vocab: crate::synth::VOCAB_SIZE,
            lora_rank: 4,
            lora_alpha: 4.0,
            patch_mode: PatchMode::Split,
            image_shift: ImageShift::Width,
            base_seed: 0xba5e,
            adapter_seed: 0xada9,
        }
    }
}

impl DitConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn lora_scale(&self) -> f32 {
        self.lora_alpha / self.lora_rank as f32
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.dim
    }

    /// Channels entering the video patchifier.
    pub fn video_in_channels(&self) -> usize {
        match self.patch_mode {
            PatchMode::Split => 2 * self.channels + self.mask_slots,
            PatchMode::Literal => 3 * self.channels + self.mask_slots,
        }
    }

    /// Key/value pairs covering every field, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("layers", self.layers.to_string()),
            ("dim", self.dim.to_string()),
            ("heads", self.heads.to_string()),
            ("channels", self.channels.to_string()),
            ("mask_slots", self.mask_slots.to_string()),
            ("text_dim", self.text_dim.to_string()),
            ("vocab", self.vocab.to_string()),
            ("lora_rank", self.lora_rank.to_string()),
            ("lora_alpha", self.lora_alpha.to_string()),
            ("patch_mode", self.patch_mode.to_string()),
            ("image_shift", self.image_shift.to_string()),
            ("base_seed", self.base_seed.to_string()),
            ("adapter_seed", self.adapter_seed.to_string()),
        ]
    }

    /// Sets one field from text. Returns `Ok(false)` for keys that are not
    /// model fields.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| config_err!("{key}: cannot parse {v:?}"))
        }
        match key {
            "layers" => self.layers = num(key, value)?,
            "dim" => self.dim = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "channels" => self.channels = num(key, value)?,
            "mask_slots" => self.mask_slots = num(key, value)?,
            "text_dim" => self.text_dim = num(key, value)?,
            "vocab" => self.vocab = num(key, value)?,
            "lora_rank" => self.lora_rank = num(key, value)?,
            "lora_alpha" => self.lora_alpha = num(key, value)?,
            "patch_mode" => self.patch_mode = value.parse()?,
            "image_shift" => self.image_shift = value.parse()?,
            "base_seed" => self.base_seed = num(key, value)?,
            "adapter_seed" => self.adapter_seed = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.dim == 0 {
            return Err(config_err!("layers, heads and dim must be positive"));
        }
        if self.dim % self.heads != 0 {
            return Err(config_err!(
                "dim {} is not divisible by {} heads",
                self.dim,
                self.heads
            ));
        }
        RopeLayout::for_dim(self.head_dim())
            .map_err(|e| config_err!("head dimension {}: {e}", self.head_dim()))?;
        if self.channels < 3 || self.mask_slots == 0 {
            return Err(config_err!("need at least 3 latent channels and 1 mask slot"));
        }
        if self.lora_rank == 0 || self.lora_rank > self.dim {
            return Err(config_err!(
                "lora rank {} outside 1..={}",
                self.lora_rank,
                self.dim
            ));
        }
        if self.vocab == 0 || self.text_dim == 0 {
            return Err(config_err!("text vocabulary and width must be positive"));
        }
        Ok(())
    }
}
