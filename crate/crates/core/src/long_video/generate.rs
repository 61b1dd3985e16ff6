use rayon::prelude::*;

use crate::codec::{Codec, LatentVideo, PixelVideo};
use crate::dit::{ConditionBundle, DitModel};
use crate::error::{config_err, shape_err, Error, Result};
use crate::kv_share::{AttnMask, Counters, Gate, KvCache, ShareSettings, SharingHook};
use crate::numerics::Tensor;
use crate::ppm::snap_tensor;
use crate::sampler::{lead_stitch_flags, sample, FrameMask, SamplerConfig};

use super::plan::{Segment, SegmentPlan};

/// Per-frame driving conditions for the whole video.
#[derive(Clone, Debug)]
pub struct Track {
    pub pose: PixelVideo,
    pub hand: PixelVideo,
}

/// Appearance and motion inputs of a long generation.
pub struct Conditioning<'a> {
    pub reference: &'a Tensor,
    pub caption: &'a [usize],
    pub track: &'a Track,
}

#[derive(Clone, Debug)]
pub struct LongConfig {
    pub sampler_steps: usize,
    /// `(k_t, k_l)`; `(0, 0)` disables sharing.
    pub gate: (usize, usize),
    pub share: ShareSettings,
}

#[derive(Clone, Debug)]
pub struct SegmentOutput {
    /// `c × f × h × w` latents of the segment including its leading frame.
    pub latents: Tensor,
    /// Subject mask over video tokens at the first denoising step.
    pub subject_mask: Option<AttnMask>,
    pub counters: Counters,
}

#[derive(Clone, Debug)]
pub struct LongVideo {
    /// Assembled frames, quantised to 8 bits.
    pub video: PixelVideo,
    pub segments: Vec<SegmentOutput>,
    pub cache: KvCache,
    pub gate: Gate,
}

struct Ctx<'a> {
    plan: &'a SegmentPlan,
    cond: &'a Conditioning<'a>,
    codec: &'a Codec,
    cfg: &'a LongConfig,
    z_img: Tensor,
    /// Latent height and width.
    grid: (usize, usize),
}

impl Ctx<'_> {
    fn local_frames(&self, seg: &Segment, video: &PixelVideo) -> Result<PixelVideo> {
        let last = video.num_frames() - 1;
        let frames: Vec<Tensor> = (0..=self.plan.f_seg)
            .map(|i| video.frame((seg.start + i).saturating_sub(1).min(last)))
            .collect();
        PixelVideo::from_frames(&frames)
    }

    fn template(&self, seg: &Segment) -> Result<ConditionBundle> {
        let z_pose = self.codec.encode(&self.local_frames(seg, &self.cond.track.pose)?)?.latents;
        let z_hand = self.codec.encode(&self.local_frames(seg, &self.cond.track.hand)?)?.latents;
        let slots = self.codec.config().temporal_stride;
        let shape = z_pose.shape().to_vec();
        Ok(ConditionBundle {
            z_vid: Tensor::zeros(&shape),
            mask: Tensor::zeros(&[slots, shape[1], shape[2], shape[3]]),
            z_pose,
            z_hand,
            z_img: self.z_img.clone(),
            caption: self.cond.caption.to_vec(),
        })
    }

    fn run<'h>(
        &self,
        model: &DitModel,
        seg: &Segment,
        mask: &FrameMask,
        preserved: Option<&Tensor>,
        mut hook: SharingHook<'h>,
    ) -> Result<(SegmentOutput, SharingHook<'h>)> {
        let template = self.template(seg)?;
        let scfg = SamplerConfig {
            steps: self.cfg.sampler_steps,
            seed: seg.seed,
        };
        let latents = sample(model, &template, mask, preserved, &scfg, &mut hook)?;
        let out = SegmentOutput {
            latents,
            subject_mask: hook.observed_mask().cloned(),
            counters: hook.counters().clone(),
        };
        Ok((out, hook))
    }

    fn base_mask(&self) -> Result<FrameMask> {
        let (h, w) = self.grid;
        FrameMask::pack(&vec![false; self.plan.f_seg + 1], self.codec.config().temporal_stride, h, w)
    }

    /// Preserved latents of a stitch: the leading frame re-encoded from the
    /// left key's decoded frame, then whole latent blocks copied from the
    /// neighbouring keys.
    fn stitch_preserved(&self, seg: &Segment, left: &SegmentOutput, left_seg: &Segment, right: &SegmentOutput) -> Result<Tensor> {
        let s = self.codec.config().temporal_stride;
        let (f_seg, q) = (self.plan.f_seg, self.plan.q);
        let lv = self.codec.decode(&LatentVideo { latents: left.latents.clone() })?;
        let lead = self.codec.encode_image(&lv.frame(left_seg.local(seg.start - 1)))?.latents;
        let [c, f, h, w] = *left.latents.shape() else { unreachable!() };
        let mut out = Tensor::zeros(&[c, f, h, w]);
        let shift = (f_seg - q) / s;
        let plane = h * w;
        let copy = |out: &mut Tensor, src: &Tensor, src_f: usize, from: usize, to: usize| {
            for ch in 0..c {
                let a = (ch * src_f + from) * plane;
                let b = (ch * f + to) * plane;
                out.data_mut()[b..b + plane].copy_from_slice(&src.data()[a..a + plane]);
            }
        };
        copy(&mut out, &lead, 1, 0, 0);
        for j in 1..=q / s {
            copy(&mut out, &left.latents, f, shift + j, j);
        }
        for j in f - q / s..f {
            copy(&mut out, &right.latents, f, j - shift, j);
        }
        Ok(out)
    }
}

fn check_compatible(base: &DitModel, stitch: &DitModel, codec: &Codec) -> Result<()> {
    let (a, b) = (base.config(), stitch.config());
    if (a.layers, a.dim, a.heads, a.channels, a.mask_slots) != (b.layers, b.dim, b.heads, b.channels, b.mask_slots)
        || a.base_seed != b.base_seed
    {
        return Err(config_err!(
            "base and stitch checkpoints disagree on the model layout; cached keys and values cannot be shared"
        ));
    }
    if a.channels != codec.config().channels || a.mask_slots != codec.config().temporal_stride {
        return Err(config_err!("model channels and mask slots must match the codec"));
    }
    Ok(())
}

/// Generates every segment of the plan and assembles the video: the
/// source key first (capturing keys and values at gated pairs), then the
/// other keys in parallel, then the stitches in parallel.
pub fn generate_long(
    plan: &SegmentPlan,
    cond: &Conditioning<'_>,
    base: &DitModel,
    stitch: &DitModel,
    codec: &Codec,
    cfg: &LongConfig,
) -> Result<LongVideo> {
    check_compatible(base, stitch, codec)?;
    let s = codec.config().temporal_stride;
    if plan.f_seg % s != 0 {
        return Err(config_err!("segment length {} must be a multiple of the temporal stride {s}", plan.f_seg));
    }
    if plan.segments.len() > 1 && plan.q % s != 0 {
        return Err(config_err!(
            "retained run of {} frames must be a multiple of the temporal stride {s} for exact stitching",
            plan.q
        ));
    }
    let needed = plan.total_frames;
    for (name, v) in [("pose", &cond.track.pose), ("hand", &cond.track.hand)] {
        if v.num_frames() < needed {
            return Err(Error::Usage(format!(
                "{name} track has {} frames, the video needs {needed}",
                v.num_frames()
            )));
        }
    }
    let (_, th, tw) = cond.track.pose.dims();
    let (_, hh, hw) = cond.track.hand.dims();
    if cond.reference.shape() != [3, th, tw] || (hh, hw) != (th, tw) {
        return Err(shape_err!("reference image and tracks must share one frame size"));
    }
    let z_img = codec.encode_image(cond.reference)?.latents;
    let grid = (z_img.shape()[2], z_img.shape()[3]);
    let gate = Gate::new(cfg.gate.0, cfg.gate.1, cfg.sampler_steps, base.config().layers)?;
    let ctx = Ctx {
        plan,
        cond,
        codec,
        cfg,
        z_img,
        grid,
    };
    let base_mask = ctx.base_mask()?;

    let src_i = plan.source_index();
    let (src_out, hook) = ctx.run(
        base,
        &plan.segments[src_i],
        &base_mask,
        None,
        SharingHook::capture(gate, cfg.share.clone()),
    )?;
    let cache = hook.into_cache()?;

    let mut outputs: Vec<Option<SegmentOutput>> = vec![None; plan.segments.len()];
    outputs[src_i] = Some(src_out);
    let consume = |model: &DitModel, seg: &Segment, mask: &FrameMask, preserved: Option<&Tensor>| {
        let hook = if gate.is_empty() {
            SharingHook::observe(gate, cfg.share.clone())
        } else {
            SharingHook::consume(&cache, cfg.share.clone())
        };
        ctx.run(model, seg, mask, preserved, hook).map(|(o, _)| o)
    };

    let keys: Vec<usize> = (0..plan.segments.len()).step_by(2).filter(|&i| i != src_i).collect();
    let done: Vec<(usize, SegmentOutput)> = keys
        .par_iter()
        .map(|&i| consume(base, &plan.segments[i], &base_mask, None).map(|o| (i, o)))
        .collect::<Result<_>>()?;
    for (i, o) in done {
        outputs[i] = Some(o);
    }

    let (h, w) = grid;
    let stitch_mask = FrameMask::pack(&lead_stitch_flags(plan.f_seg, plan.retain_ratio)?, s, h, w)?;
    let done: Vec<(usize, SegmentOutput)> = (1..plan.segments.len())
        .step_by(2)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&i| {
            let (l, r) = (outputs[i - 1].as_ref().unwrap(), outputs[i + 1].as_ref().unwrap());
            let seg = &plan.segments[i];
            let preserved = ctx.stitch_preserved(seg, l, &plan.segments[i - 1], r)?;
            consume(stitch, seg, &stitch_mask, Some(&preserved)).map(|o| (i, o))
        })
        .collect::<Result<_>>()?;
    for (i, o) in done {
        outputs[i] = Some(o);
    }

    let segments: Vec<SegmentOutput> = outputs.into_iter().map(|o| o.expect("every segment generated")).collect();
    let latents: Vec<Tensor> = segments.iter().map(|s| s.latents.clone()).collect();
    let video = assemble(plan, &latents, codec)?;
    Ok(LongVideo {
        video,
        segments,
        cache,
        gate,
    })
}

/// Decodes each segment and writes the frames it emits into one video,
/// quantised to 8 bits.
pub fn assemble(plan: &SegmentPlan, latents: &[Tensor], codec: &Codec) -> Result<PixelVideo> {
    if latents.len() != plan.segments.len() {
        return Err(Error::Usage(format!(
            "plan has {} segments, {} were generated",
            plan.segments.len(),
            latents.len()
        )));
    }
    let mut frames: Vec<Option<Tensor>> = vec![None; plan.total_frames];
    for (seg, z) in plan.segments.iter().zip(latents) {
        let v = codec.decode(&LatentVideo { latents: z.clone() })?;
        for g in seg.emit.clone() {
            if frames[g].is_some() {
                return Err(Error::Internal(format!("frame {g} emitted twice")));
            }
            frames[g] = Some(snap_tensor(&v.frame(seg.local(g))));
        }
    }
    let frames: Vec<Tensor> = frames
        .into_iter()
        .enumerate()
        .map(|(g, f)| f.ok_or_else(|| Error::Internal(format!("frame {g} not covered by the plan"))))
        .collect::<Result<_>>()?;
    PixelVideo::from_frames(&frames)
}
