//! Procedural scenes: a textured static background with an articulated
//! stick figure, plus the matching pose, hand and mask renders.

mod render;
mod store;

use rayon::prelude::*;

use crate::codec::{CodecConfig, PixelVideo};
use crate::error::{config_err, Result};
use crate::numerics::{Rng, Tensor};

pub use render::{
    pose_limb_segments, render_background, render_track, segment_distance, strip_hand_keypoints,
    Skeleton, TrackRender,
    HAND_KEYPOINT_COLOR, HAND_PATCH, POSE_LIMB_COLORS,
};
pub use store::{export_dataset, export_sample, load_dataset, load_sample};

pub const VOCAB_SIZE: usize = 32;
pub const CAPTION_LEN: usize = 8;
/// Token ids `0..SUBJECT_WORDS` name the subject; the rest are scene words.
pub const SUBJECT_WORDS: usize = 4;
pub const SUBJECT_SLOT: usize = 2;

/// Body proportions and colours. Lengths are fractions of frame height,
/// the anchor is the torso centre as fractions of `(W, H)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Appearance {
    pub torso_color: [f32; 3],
    pub arm_color: [f32; 3],
    pub head_color: [f32; 3],
    pub torso_len: f32,
    pub upper_arm: f32,
    pub forearm: f32,
    pub head_radius: f32,
    pub thickness: f32,
    pub anchor: [f32; 2],
}

/// Per-frame joint parameters relative to the rest pose. Angles are in
/// radians; the shift is in fractions of `(W, H)`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PoseFrame {
    pub shift: [f32; 2],
    pub lean: f32,
    pub shoulders: [f32; 2],
    pub elbows: [f32; 2],
}

impl PoseFrame {
    pub const FIELDS: usize = 7;

    pub fn to_array(&self) -> [f32; Self::FIELDS] {
        [
            self.shift[0],
            self.shift[1],
            self.lean,
            self.shoulders[0],
            self.shoulders[1],
            self.elbows[0],
            self.elbows[1],
        ]
    }

    pub fn from_array(a: [f32; Self::FIELDS]) -> Self {
        Self {
            shift: [a[0], a[1]],
            lean: a[2],
            shoulders: [a[3], a[4]],
            elbows: [a[5], a[6]],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub appearance: Appearance,
    pub motion: Vec<PoseFrame>,
    pub background_id: u64,
    pub caption_tokens: Vec<usize>,
    pub subject_token_indices: Vec<usize>,
}

const SIBLING_STREAM: u64 = 0x51b1;

impl SceneSpec {
    /// Draws a scene with `frames` frames of motion.
    pub fn random(seed: u64, frames: usize) -> Self {
        let rng = Rng::new(seed);
        let mut a = rng.split(1);
        let color = |r: &mut Rng| [0; 3].map(|_| r.uniform_in(0.25, 1.0));
        let appearance = Appearance {
            torso_color: color(&mut a),
            arm_color: color(&mut a),
            head_color: color(&mut a),
            torso_len: a.uniform_in(0.26, 0.34),
            upper_arm: a.uniform_in(0.14, 0.18),
            forearm: a.uniform_in(0.12, 0.16),
            head_radius: a.uniform_in(0.07, 0.09),
            thickness: a.uniform_in(0.045, 0.055),
            anchor: [a.uniform_in(0.4, 0.6), a.uniform_in(0.5, 0.6)],
        };
        let mut c = rng.split(2);
        let mut caption: Vec<usize> = (0..CAPTION_LEN)
            .map(|_| SUBJECT_WORDS + c.below(VOCAB_SIZE - SUBJECT_WORDS))
            .collect();
        caption[SUBJECT_SLOT] = c.below(SUBJECT_WORDS);
        Self {
            seed,
            appearance,
            motion: random_motion(&mut rng.split(3), frames),
            background_id: rng.split(4).next_u64(),
            caption_tokens: caption,
            subject_token_indices: vec![SUBJECT_SLOT],
        }
    }

    /// Same appearance, background and caption with a different motion.
    pub fn sibling(&self) -> Self {
        let mut rng = Rng::new(self.seed).split(SIBLING_STREAM);
        let mut motion = random_motion(&mut rng, self.motion.len().max(1));
        // keep the sibling's first pose visibly apart from the target's
        if let (Some(m), Some(t)) = (motion.first_mut(), self.motion.first()) {
            m.shoulders = [t.shoulders[0] + 0.9, t.shoulders[1] + 0.9];
            m.elbows = [t.elbows[0] - 0.5, t.elbows[1] - 0.5];
        }
        Self {
            motion,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.subject_token_indices.is_empty() {
            return Err(config_err!("subject token index set is empty"));
        }
        if let Some(&i) = self
            .subject_token_indices
            .iter()
            .find(|&&i| i >= self.caption_tokens.len())
        {
            return Err(config_err!(
                "subject token index {i} outside caption of length {}",
                self.caption_tokens.len()
            ));
        }
        if let Some(&t) = self.caption_tokens.iter().find(|&&t| t >= VOCAB_SIZE) {
            return Err(config_err!("caption token {t} outside vocabulary of {VOCAB_SIZE}"));
        }
        if self.motion.is_empty() {
            return Err(config_err!("motion script is empty"));
        }
        Ok(())
    }
}

/// Smooth periodic joint trajectories.
pub fn random_motion(rng: &mut Rng, frames: usize) -> Vec<PoseFrame> {
    let mut wave = |amp: f32| {
        let a = rng.uniform_in(0.3, 1.0) * amp;
        let w = rng.uniform_in(0.15, 0.45);
        let p = rng.uniform_in(0.0, std::f32::consts::TAU);
        move |f: usize| a * (w * f as f32 + p).sin()
    };
    let sx = wave(0.08);
    let sy = wave(0.03);
    let lean = wave(0.15);
    let sh = [wave(0.9), wave(0.9)];
    let el = [wave(0.8), wave(0.8)];
    (0..frames)
        .map(|f| PoseFrame {
            shift: [sx(f), sy(f)],
            lean: lean(f),
            shoulders: [sh[0](f), sh[1](f)],
            elbows: [el[0](f).abs(), el[1](f).abs()],
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub video: PixelVideo,
    pub pose: PixelVideo,
    pub hand: PixelVideo,
    pub reference: Tensor,
    pub gt_subject_mask: Tensor,
    pub spec: SceneSpec,
    /// Some frame had to be shifted to keep the subject inside the image.
    pub clamped: bool,
}

impl Sample {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.video.dims()
    }
}

/// Renders a scene whose motion length is the clip length `F`.
pub fn generate_scene(spec: &SceneSpec, height: usize, width: usize) -> Result<Sample> {
    spec.validate()?;
    let frames = spec.motion.len();
    crate::codec::latent_shape(frames, height, width, &CodecConfig::default())?;
    let track = render_track(spec, height, width)?;
    let mut sibling = spec.sibling();
    sibling.motion.truncate(1);
    let sibling = render_track(&sibling, height, width)?;
    Ok(Sample {
        video: track.video,
        pose: track.pose,
        hand: track.hand,
        reference: sibling.video.frame(0),
        gt_subject_mask: track.mask,
        spec: spec.clone(),
        clamped: track.clamped,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frames: 17,
            height: 64,
            width: 64,
        }
    }
}

/// Seed of scene `i` in a dataset drawn with `seed`.
pub fn scene_seed(seed: u64, i: usize) -> u64 {
    Rng::new(seed).split(i as u64).next_u64()
}

pub fn make_dataset(n_scenes: usize, cfg: SynthConfig, seed: u64) -> Result<Vec<Sample>> {
    if n_scenes == 0 {
        return Err(config_err!("dataset needs at least one scene"));
    }
    (0..n_scenes)
        .into_par_iter()
        .map(|i| {
            let spec = SceneSpec::random(scene_seed(seed, i), cfg.frames);
            generate_scene(&spec, cfg.height, cfg.width)
        })
        .collect()
}

/// Even indices train, odd indices validate.
pub fn split_indices(n: usize) -> (Vec<usize>, Vec<usize>) {
    (0..n).partition(|i| i % 2 == 0)
}
