use std::path::{Path, PathBuf};

use posegen_core::checkpoint::Container;
use posegen_core::codec::Codec;
use posegen_core::dit::DitModel;
use posegen_core::kv_share::{parse_gate_spec, Gate, KvCache, ShareSettings, SuppressMode};
use posegen_core::long_video::{generate_long, plan_segments, Conditioning, LongConfig, LongVideo, SegmentPlan, Track};
use posegen_core::metrics::{gate_label, metrics_csv, predicted_masks, segment_metrics, MetricRow};
use posegen_core::numerics::Tensor;
use posegen_core::ppm::{write_masks, write_video};
use posegen_core::synth::{load_sample, Sample};
use posegen_core::trainer::{Checkpoint, Role};
use posegen_core::{Error, Result};

use crate::config::Settings;

use super::codec_for;

pub const FRAMES_DIR: &str = "frames";
pub const MASKS_DIR: &str = "pred_masks";
pub const PLAN_FILE: &str = "plan.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CACHE_FILE: &str = "kv_cache.pgck";
pub const CONFIG_FILE: &str = "resolved.cfg";
/// Latent grid `f,h,w` of one segment, stored alongside the cache so its
/// token masks can be drawn.
pub const GRID_ENTRY: &str = "run/grid";

pub fn defaults() -> Settings {
    Settings::new(
        "generate",
        [
            ("ref", String::new()),
            ("poses", String::new()),
            ("length", "16".into()),
            ("base", String::new()),
            ("stitch", String::new()),
            ("gate", "default".into()),
            ("seed", "0".into()),
            ("steps", "20".into()),
            ("segment_frames", "16".into()),
            ("retain_ratio", "0.25".into()),
            ("source_key", "0".into()),
            ("suppress", "literal".into()),
            ("softmax_map", "false".into()),
            ("out", String::new()),
        ],
    )
}

/// Everything a generation reads from disk.
pub struct Inputs {
    pub reference: Sample,
    pub poses: Sample,
    pub base: DitModel,
    pub stitch: Option<DitModel>,
    pub codec: Codec,
}

fn load_role(path: &Path, role: Role) -> Result<DitModel> {
    let ck = Checkpoint::read(path)?;
    if ck.role != role {
        return Err(Error::Config(format!(
            "{} holds a {} checkpoint, expected {role}",
            path.display(),
            ck.role
        )));
    }
    ck.instantiate()
}

pub fn load_inputs(s: &Settings) -> Result<Inputs> {
    let base = load_role(&s.path("base")?, Role::Base)?;
    let stitch = s.opt_path("stitch").map(|p| load_role(&p, Role::Stitch)).transpose()?;
    let codec = codec_for(base.config())?;
    Ok(Inputs {
        reference: load_sample(&s.path("ref")?)?,
        poses: load_sample(&s.path("poses")?)?,
        base,
        stitch,
        codec,
    })
}

/// `(k_t, k_l)` for a gate setting, resolving `default`.
pub fn resolve_gate(spec: &str, steps: usize, layers: usize) -> Result<(usize, usize)> {
    if spec == "default" {
        let g = Gate::default_for(steps, layers)?;
        Ok((g.k_t, g.k_l))
    } else {
        parse_gate_spec(spec)
    }
}

/// Generation settings shared by `generate` and `sweep`.
#[derive(Clone, Debug)]
pub struct GenParams {
    pub length: usize,
    pub segment_frames: usize,
    pub retain_ratio: f64,
    pub seed: u64,
    pub source_key: usize,
    pub steps: usize,
    pub suppress: SuppressMode,
    pub softmax_map: bool,
}

impl GenParams {
    pub fn from_settings(s: &Settings) -> Result<Self> {
        Ok(Self {
            length: s.get("length")?,
            segment_frames: s.get("segment_frames")?,
            retain_ratio: s.get("retain_ratio")?,
            seed: s.get("seed")?,
            source_key: s.get("source_key")?,
            steps: s.get("steps")?,
            suppress: s.get("suppress")?,
            softmax_map: s.get("softmax_map")?,
        })
    }

    pub fn plan(&self) -> Result<SegmentPlan> {
        plan_segments(self.length, self.segment_frames, self.retain_ratio, self.seed)?.with_source_key(self.source_key)
    }
}

pub struct RunResult {
    pub plan: SegmentPlan,
    pub long: LongVideo,
    pub pred_masks: Tensor,
    pub rows: Vec<MetricRow>,
}

/// Plans and generates one long video with the given gate and computes its
/// metrics against the driving scene's ground truth.
pub fn generate(inputs: &Inputs, p: &GenParams, gate: (usize, usize)) -> Result<RunResult> {
    let plan = p.plan()?;
    let stitch = match &inputs.stitch {
        Some(m) => m,
        None if plan.segments.len() == 1 => &inputs.base,
        None => return Err(Error::Usage("plans with stitch segments need a stitch checkpoint".into())),
    };
    let track = Track {
        pose: inputs.poses.pose.clone(),
        hand: inputs.poses.hand.clone(),
    };
    let spec = &inputs.reference.spec;
    let cond = Conditioning {
        reference: &inputs.reference.reference,
        caption: &spec.caption_tokens,
        track: &track,
    };
    let cfg = LongConfig {
        sampler_steps: p.steps,
        gate,
        share: ShareSettings {
            subject_indices: spec.subject_token_indices.clone(),
            mode: p.suppress,
            softmax_map: p.softmax_map,
            force_ones: false,
        },
    };
    let long = generate_long(&plan, &cond, &inputs.base, stitch, &inputs.codec, &cfg)?;
    let (_, h, w) = long.video.dims();
    let pred_masks = predicted_masks(&plan, &long.segments, inputs.codec.config(), h, w)?;
    let rows = segment_metrics(
        &plan,
        &long.video,
        &pred_masks,
        &inputs.poses.gt_subject_mask,
        &gate_label(gate.0, gate.1),
        long.cache.bytes(),
    )?;
    Ok(RunResult {
        plan,
        long,
        pred_masks,
        rows,
    })
}

pub fn cache_container(r: &RunResult) -> Container {
    let mut c = r.long.cache.to_container();
    let shape = r.long.segments[0].latents.shape();
    c.insert_text(GRID_ENTRY, format!("{},{},{}", shape[1], shape[2], shape[3]));
    c
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes frames, predicted masks, plan manifest, metrics, cache and the
/// resolved config into `out`.
pub fn write_run(out: &Path, s: &Settings, r: &RunResult) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_video(&out.join(FRAMES_DIR), &r.long.video)?;
    write_masks(&out.join(MASKS_DIR), &r.pred_masks)?;
    write_text(&out.join(PLAN_FILE), &r.plan.to_manifest())?;
    write_text(&out.join(METRICS_FILE), &metrics_csv(&r.rows))?;
    cache_container(r).write(&out.join(CACHE_FILE))?;
    s.write(&out.join(CONFIG_FILE))
}

pub fn run(s: &Settings) -> Result<(PathBuf, RunResult)> {
    let out = s.path("out")?;
    let inputs = load_inputs(s)?;
    let params = GenParams::from_settings(s)?;
    let gate = resolve_gate(s.raw("gate"), params.steps, inputs.base.config().layers)?;
    let mut resolved = s.clone();
    resolved.set("gate", format!("{},{}", gate.0, gate.1))?;
    let r = generate(&inputs, &params, gate)?;
    write_run(&out, &resolved, &r)?;
    Ok((out, r))
}

/// Reads a cache file written by `generate`.
pub fn read_cache(path: &Path) -> Result<(KvCache, Option<(usize, usize, usize)>)> {
    let c = Container::read(path)?;
    let cache = KvCache::from_container(&c)?;
    let grid = match c.get(GRID_ENTRY) {
        Some(_) => {
            let v = crate::config::parse_list(c.text(GRID_ENTRY)?)
                .map_err(|_| Error::Format(format!("{}: bad {GRID_ENTRY}", path.display())))?;
            match v[..] {
                [f, h, w] => Some((f, h, w)),
                _ => return Err(Error::Format(format!("{}: bad {GRID_ENTRY}", path.display()))),
            }
        }
        None => None,
    };
    Ok((cache, grid))
}
