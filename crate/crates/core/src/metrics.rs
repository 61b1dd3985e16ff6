//! Per-segment quality measurements of a long generation.

use std::fmt::Write as _;

use crate::codec::{latent_frame_span, CodecConfig, PixelVideo};
use crate::dit::patch::PATCH;
use crate::error::{shape_err, Error, Result};
use crate::kv_share::AttnMask;
use crate::long_video::{SegmentKind, SegmentOutput, SegmentPlan};
use crate::numerics::Tensor;

pub const METRICS_HEADER: &str = "# posegen metrics v1";
pub const METRICS_COLUMNS: &str = "gate,segment,kind,start,end,bg_mse_vs_source,subject_iou,cache_bytes";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    /// `k_t/k_l`.
    pub gate: String,
    pub segment: usize,
    pub kind: SegmentKind,
    pub start: usize,
    pub end: usize,
    pub bg_mse_vs_source: f64,
    pub subject_iou: f64,
    pub cache_bytes: usize,
}

pub fn gate_label(k_t: usize, k_l: usize) -> String {
    format!("{k_t}/{k_l}")
}

/// Expands a per-token mask over an `f × h × w` latent grid into pixel
/// masks for the `1 + (f - 1)·stride` frames it covers.
pub fn token_mask_to_pixels(mask: &AttnMask, f: usize, h: usize, w: usize, codec: &CodecConfig) -> Result<Tensor> {
    let (hp, wp) = (h / PATCH, w / PATCH);
    if mask.len() != f * hp * wp {
        return Err(shape_err!(
            "mask of {} tokens does not match a {f}×{h}×{w} latent grid",
            mask.len()
        ));
    }
    let s = codec.temporal_stride;
    let cell = PATCH * codec.spatial_stride;
    let (frames, ph, pw) = (1 + (f - 1) * s, h * codec.spatial_stride, w * codec.spatial_stride);
    let mut out = vec![0.0f32; frames * ph * pw];
    for j in 0..f {
        for fr in latent_frame_span(j, s) {
            for y in 0..ph {
                for x in 0..pw {
                    let tok = (j * hp + y / cell) * wp + x / cell;
                    out[(fr * ph + y) * pw + x] = mask.values.data()[tok];
                }
            }
        }
    }
    Tensor::new(vec![frames, ph, pw], out)
}

/// Global `total × H × W` predicted subject masks, each frame taken from
/// the segment that emits it. Frames of segments without a mask stay 0.
pub fn predicted_masks(
    plan: &SegmentPlan,
    outputs: &[SegmentOutput],
    codec: &CodecConfig,
    height: usize,
    width: usize,
) -> Result<Tensor> {
    let plane = height * width;
    let mut out = Tensor::zeros(&[plan.total_frames, height, width]);
    for (seg, o) in plan.segments.iter().zip(outputs) {
        let Some(m) = &o.subject_mask else { continue };
        let [_, f, h, w] = *o.latents.shape() else {
            return Err(shape_err!("segment latents must be c×f×h×w"));
        };
        let local = token_mask_to_pixels(m, f, h, w, codec)?;
        if local.shape()[1..] != [height, width] {
            return Err(shape_err!("mask grid does not match the {height}×{width} frames"));
        }
        for g in seg.emit.clone() {
            let l = seg.local(g);
            out.data_mut()[g * plane..(g + 1) * plane].copy_from_slice(&local.data()[l * plane..(l + 1) * plane]);
        }
    }
    Ok(out)
}

/// Mean squared difference over pixels that are background in both
/// ground-truth frames, per colour channel. NaN when no pixel qualifies.
pub fn background_mse(video: &PixelVideo, gt: &Tensor, pairs: &[(usize, usize)]) -> f64 {
    let (_, h, w) = video.dims();
    let plane = h * w;
    let (mut sum, mut n) = (0.0f64, 0usize);
    for &(a, b) in pairs {
        let (fa, fb) = (video.frame(a), video.frame(b));
        let (ma, mb) = (&gt.data()[a * plane..(a + 1) * plane], &gt.data()[b * plane..(b + 1) * plane]);
        for p in 0..plane {
            if ma[p] != 0.0 || mb[p] != 0.0 {
                continue;
            }
            for c in 0..3 {
                let d = fa.data()[c * plane + p] as f64 - fb.data()[c * plane + p] as f64;
                sum += d * d;
                n += 1;
            }
        }
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Intersection over union of two binary mask stacks restricted to the
/// given frames; 1 when both are empty.
pub fn mask_iou(pred: &Tensor, gt: &Tensor, frames: std::ops::Range<usize>) -> f64 {
    let plane = pred.shape()[1] * pred.shape()[2];
    let (mut inter, mut union) = (0usize, 0usize);
    for i in frames.start * plane..frames.end * plane {
        let (a, b) = (pred.data()[i] != 0.0, gt.data()[i] != 0.0);
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// One row per segment. Background MSE compares each emitted frame with
/// the assembled frame at the same offset inside the source segment.
/// Ground truth may run past the end of the video.
pub fn segment_metrics(
    plan: &SegmentPlan,
    video: &PixelVideo,
    pred: &Tensor,
    gt: &Tensor,
    gate: &str,
    cache_bytes: usize,
) -> Result<Vec<MetricRow>> {
    let (frames, h, w) = video.dims();
    if pred.shape() != [frames, h, w] {
        return Err(shape_err!(
            "predicted masks {:?} do not match the {frames}×{h}×{w} video",
            pred.shape()
        ));
    }
    if gt.shape().len() != 3 || gt.shape()[0] < frames || gt.shape()[1..] != [h, w] {
        return Err(shape_err!(
            "ground-truth masks {:?} do not cover the {frames}×{h}×{w} video",
            gt.shape()
        ));
    }
    if frames != plan.total_frames {
        return Err(Error::Usage(format!(
            "video has {frames} frames, the plan {}",
            plan.total_frames
        )));
    }
    let src = plan.segments[plan.source_index()].start;
    Ok(plan
        .segments
        .iter()
        .enumerate()
        .map(|(i, seg)| {
            let pairs: Vec<(usize, usize)> = seg
                .emit
                .clone()
                .map(|g| (g, src + g - seg.start))
                .filter(|&(_, b)| b < frames)
                .collect();
            MetricRow {
                gate: gate.to_string(),
                segment: i,
                kind: seg.kind,
                start: seg.start,
                end: seg.end(plan.f_seg),
                bg_mse_vs_source: background_mse(video, gt, &pairs),
                subject_iou: mask_iou(pred, gt, seg.emit.clone()),
                cache_bytes,
            }
        })
        .collect())
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n{METRICS_COLUMNS}\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.gate, r.segment, r.kind, r.start, r.end, r.bg_mse_vs_source, r.subject_iou, r.cache_bytes
        )
        .expect("write to string");
    }
    s
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) || lines.next() != Some(METRICS_COLUMNS) {
        return Err(Error::Format("not a posegen metrics v1 file".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 8 {
                return Err(Error::Format(format!("metrics row has {} fields: {l:?}", f.len())));
            }
            let bad = |what: &str| Error::Format(format!("metrics row {l:?}: bad {what}"));
            Ok(MetricRow {
                gate: f[0].to_string(),
                segment: f[1].parse().map_err(|_| bad("segment"))?,
                kind: f[2].parse()?,
                start: f[3].parse().map_err(|_| bad("start"))?,
                end: f[4].parse().map_err(|_| bad("end"))?,
                bg_mse_vs_source: f[5].parse().map_err(|_| bad("bg_mse_vs_source"))?,
                subject_iou: f[6].parse().map_err(|_| bad("subject_iou"))?,
                cache_bytes: f[7].parse().map_err(|_| bad("cache_bytes"))?,
            })
        })
        .collect()
}
