//! Adapter-only training of the base and stitch roles.

mod checkpoint;

use rayon::prelude::*;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT};

use crate::codec::Codec;
use crate::dit::{ConditionBundle, DitModel, ForwardOptions, NoHook, ParamId};
use crate::error::{config_err, shape_err, Error, Result};
use crate::numerics::{Rng, Tape, Tensor, Var};
use crate::sampler::{lead_stitch_flags, noise, FrameMask};
use crate::synth::{strip_hand_keypoints, Sample};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    /// Generates segments from scratch.
    Base,
    /// Fills the interior of a segment whose ends are given.
    Stitch,
}

impl std::str::FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Self::Base),
            "stitch" => Ok(Self::Stitch),
            _ => Err(config_err!("role must be base or stitch, got {s:?}")),
        }
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Base => "base",
            Self::Stitch => "stitch",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub role: Role,
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub hand_dropout: f64,
    pub retain_ratio: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            role: Role::Base,
            steps: 200,
            batch_size: 4,
            peak_lr: 1e-3,
            hand_dropout: 0.1,
            retain_ratio: 0.25,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config_err!("batch size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.hand_dropout) {
            return Err(config_err!("hand dropout {} outside [0, 1]", self.hand_dropout));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(config_err!("peak learning rate must be positive"));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        self.steps / 10
    }

    /// Learning rate applied at 1-based `step`: linear warmup to the peak,
    /// then cosine decay from the peak that reaches zero one step after the
    /// last, so every step (including a lone one) updates the parameters.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = self.warmup_steps();
        if step <= warm {
            return self.peak_lr * step as f64 / warm as f64;
        }
        let span = (self.steps - warm) as f64;
        let progress = (step - warm - 1) as f64 / span;
        self.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// One encoded training clip.
#[derive(Clone, Debug)]
pub struct Example {
    pub x0: Tensor,
    pub z_pose: Tensor,
    /// Pose latents of the render with hand keypoints removed.
    pub z_pose_no_hands: Tensor,
    pub z_hand: Tensor,
    pub z_img: Tensor,
    pub caption: Vec<usize>,
    pub mask: FrameMask,
}

/// Frame flags the role trains with for a clip of `frames` pixel frames.
pub fn role_flags(role: Role, frames: usize, retain_ratio: f64) -> Result<Vec<bool>> {
    match role {
        Role::Base => Ok(vec![false; frames]),
        Role::Stitch => lead_stitch_flags(frames - 1, retain_ratio),
    }
}

/// Encodes clips to latents, in parallel.
pub fn prepare_examples(samples: &[Sample], codec: &Codec, role: Role, retain_ratio: f64) -> Result<Vec<Example>> {
    if samples.is_empty() {
        return Err(Error::Usage("training needs a nonempty dataset".into()));
    }
    let slots = codec.config().temporal_stride;
    samples
        .par_iter()
        .map(|s| {
            let x0 = codec.encode(&s.video)?.latents;
            let [_, _, h, w] = *x0.shape() else { unreachable!() };
            let flags = role_flags(role, s.video.num_frames(), retain_ratio)?;
            Ok(Example {
                z_pose: codec.encode(&s.pose)?.latents,
                z_pose_no_hands: codec.encode(&strip_hand_keypoints(&s.pose))?.latents,
                z_hand: codec.encode(&s.hand)?.latents,
                z_img: codec.encode_image(&s.reference)?.latents,
                caption: s.spec.caption_tokens.clone(),
                mask: FrameMask::pack(&flags, slots, h, w)?,
                x0,
            })
        })
        .collect()
}

/// Which hand conditions were dropped for one sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DropoutDraw {
    pub hand: bool,
    pub keypoints: bool,
}

impl DropoutDraw {
    pub fn draw(p: f64, rng: &mut Rng) -> Self {
        Self {
            hand: rng.bernoulli(p),
            keypoints: rng.bernoulli(p),
        }
    }
}

/// Zeroes the hand latents and swaps in the keypoint-free pose latents as
/// drawn; each happens independently with probability `p`.
pub fn apply_condition_dropout(
    bundle: &ConditionBundle,
    pose_no_hands: &Tensor,
    p: f64,
    rng: &mut Rng,
) -> Result<(ConditionBundle, DropoutDraw)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(config_err!("dropout probability {p} outside [0, 1]"));
    }
    let d = DropoutDraw::draw(p, rng);
    Ok((apply_draw(bundle, pose_no_hands, d)?, d))
}

fn apply_draw(bundle: &ConditionBundle, pose_no_hands: &Tensor, d: DropoutDraw) -> Result<ConditionBundle> {
    if pose_no_hands.shape() != bundle.z_pose.shape() {
        return Err(shape_err!("keypoint-free pose latents have the wrong shape"));
    }
    let mut out = bundle.clone();
    if d.hand {
        out.z_hand = Tensor::zeros(bundle.z_hand.shape());
    }
    if d.keypoints {
        out.z_pose = pose_no_hands.clone();
    }
    Ok(out)
}

/// Noise level, noise and dropout for one sample.
#[derive(Clone, Debug)]
pub struct Draw {
    pub t: f32,
    pub eps: Tensor,
    pub dropout: DropoutDraw,
}

impl Draw {
    pub fn sample(ex: &Example, hand_dropout: f64, rng: &mut Rng) -> Self {
        let t = rng.uniform_open();
        let eps = rng.normal_tensor(ex.x0.shape(), 1.0);
        Self {
            t,
            eps,
            dropout: DropoutDraw::draw(hand_dropout, rng),
        }
    }
}

/// Per-element weights averaging the loss over latent positions that are
/// generated rather than preserved.
pub fn loss_weights(ex: &Example) -> Result<Tensor> {
    let [c, f, h, w] = *ex.x0.shape() else {
        return Err(shape_err!("latents must be c×f×h×w"));
    };
    let keep = ex.mask.preserved_latent_frames();
    if keep.len() != f {
        return Err(shape_err!("frame mask covers {} latent frames, clip has {f}", keep.len()));
    }
    let free = keep.iter().filter(|&&k| !k).count();
    if free == 0 {
        return Err(config_err!("frame mask preserves every latent frame; nothing to train"));
    }
    let wgt = 1.0 / (c * free * h * w) as f32;
    let mut data = vec![0.0f32; c * f * h * w];
    for ch in 0..c {
        for j in (0..f).filter(|&j| !keep[j]) {
            let at = (ch * f + j) * h * w;
            data[at..at + h * w].iter_mut().for_each(|x| *x = wgt);
        }
    }
    Tensor::new(vec![c, f, h, w], data)
}

/// Conditions seen by the model for a draw: `z_vid` is the noised clip,
/// which at preserved positions is the ground truth at the same level.
pub fn training_bundle(ex: &Example, draw: &Draw) -> Result<ConditionBundle> {
    let bundle = ConditionBundle {
        z_vid: noise(&ex.x0, &draw.eps, draw.t)?,
        mask: ex.mask.latent_mask.clone(),
        z_pose: ex.z_pose.clone(),
        z_hand: ex.z_hand.clone(),
        z_img: ex.z_img.clone(),
        caption: ex.caption.clone(),
    };
    apply_draw(&bundle, &ex.z_pose_no_hands, draw.dropout)
}

/// Masked mean squared error between the predicted and target velocity.
pub fn training_loss(
    model: &DitModel,
    tape: &mut Tape,
    w: &crate::dit::params::DitW<Var>,
    ex: &Example,
    draw: &Draw,
) -> Result<Var> {
    let bundle = training_bundle(ex, draw)?;
    let pred = model.forward(tape, w, &bundle, draw.t, ForwardOptions::default(), &mut NoHook)?;
    let target = tape.constant(draw.eps.zip_map(&ex.x0, |e, x| e - x)?);
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    let wt = tape.constant(loss_weights(ex)?);
    let weighted = tape.mul(sq, wt)?;
    Ok(tape.sum(weighted))
}

/// Adaptive-moment optimiser over the trainable parameters.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    ids: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(model: &DitModel) -> Self {
        let ids = model.store().trainable_ids();
        let zeros = |id: &ParamId| vec![0.0; model.store().get(*id).len()];
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: ids.iter().map(zeros).collect(),
            v: ids.iter().map(zeros).collect(),
            ids,
        }
    }

    /// Applies one update; `grads[i]` belongs to the `i`-th trainable id.
    pub fn update(&mut self, model: &mut DitModel, grads: &[Tensor], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (k, id) in self.ids.iter().enumerate() {
            let p = model.store_mut().get_mut(*id).data_mut();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, &g) in grads[k].data().iter().enumerate() {
                let g = g as f64;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let upd = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                p[i] = (p[i] as f64 - upd) as f32;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// `step,loss,lr` with one row per optimisation step.
pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut s = String::from("step,loss,lr\n");
    for r in rows {
        s.push_str(&format!("{},{:.9},{:.9e}\n", r.step, r.loss, r.lr));
    }
    s
}

/// Mean of the first and of the last `window` losses.
pub fn smoothed_ends(rows: &[LossRow], window: usize) -> Option<(f64, f64)> {
    if rows.is_empty() || window == 0 {
        return None;
    }
    let w = window.min(rows.len());
    let mean = |r: &[LossRow]| r.iter().map(|x| x.loss).sum::<f64>() / r.len() as f64;
    Some((mean(&rows[..w]), mean(&rows[rows.len() - w..])))
}

/// Runs the optimisation in place on `model`'s trainable parameters.
pub fn train(model: &mut DitModel, examples: &[Example], cfg: &TrainConfig) -> Result<Vec<LossRow>> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Usage("training needs a nonempty dataset".into()));
    }
    let root = Rng::new(cfg.seed);
    let mut adam = Adam::new(model);
    let ids = model.store().trainable_ids();
    let mut rows = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let mut rng = root.split(step as u64);
        let batch: Vec<(usize, Draw)> = (0..cfg.batch_size)
            .map(|_| {
                let i = rng.below(examples.len());
                (i, Draw::sample(&examples[i], cfg.hand_dropout, &mut rng))
            })
            .collect();
        let mut tape = Tape::new();
        let (w, vars) = model.bind_vars(&mut tape, true);
        let mut terms = Vec::with_capacity(batch.len());
        for (i, draw) in &batch {
            terms.push(training_loss(model, &mut tape, &w, &examples[*i], draw)?);
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = tape.add(total, t)?;
        }
        let loss = tape.scale(total, 1.0 / batch.len() as f32);
        let value = tape.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("training loss diverged to {value} at step {step}")));
        }
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor> = ids
            .iter()
            .map(|id| grads.get_or_zeros(vars[id.0]))
            .collect();
        if g.iter().any(|t| !t.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient at step {step}")));
        }
        let lr = cfg.lr_at(step);
        adam.update(model, &g, lr);
        rows.push(LossRow { step, loss: value, lr });
    }
    Ok(rows)
}
