use std::path::Path;

use posegen_core::long_video::SegmentPlan;
use posegen_core::metrics::{gate_label, metrics_csv, parse_metrics_csv, segment_metrics, MetricRow};
use posegen_core::ppm::{read_masks, read_video};
use posegen_core::synth::load_sample;
use posegen_core::{Error, Result};

use crate::config::Settings;

use super::generate::{self, read_cache, CACHE_FILE, CONFIG_FILE, FRAMES_DIR, MASKS_DIR, METRICS_FILE, PLAN_FILE};

pub fn defaults() -> Settings {
    Settings::new("eval", [("run", String::new()), ("out", String::new())])
}

pub struct EvalReport {
    pub rows: Vec<MetricRow>,
    pub csv: String,
    /// Largest difference to the run's own metrics file, if it has one.
    pub max_diff: Option<f64>,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn diff(a: f64, b: f64) -> f64 {
    if a.is_nan() && b.is_nan() {
        0.0
    } else {
        (a - b).abs()
    }
}

/// Recomputes a run's metrics from its written frames, predicted masks and
/// the driving scene's ground truth.
pub fn evaluate(run: &Path) -> Result<EvalReport> {
    let mut g = generate::defaults();
    g.apply_file(&run.join(CONFIG_FILE))?;
    let (k_t, k_l) = posegen_core::kv_share::parse_gate_spec(g.raw("gate"))?;
    let plan = SegmentPlan::from_manifest(&read_text(&run.join(PLAN_FILE))?)?;
    let video = read_video(&run.join(FRAMES_DIR))?;
    let pred = read_masks(&run.join(MASKS_DIR))?;
    let poses = load_sample(&g.path("poses")?)?;
    let (cache, _) = read_cache(&run.join(CACHE_FILE))?;
    let rows = segment_metrics(
        &plan,
        &video,
        &pred,
        &poses.gt_subject_mask,
        &gate_label(k_t, k_l),
        cache.bytes(),
    )?;
    let metrics = run.join(METRICS_FILE);
    let max_diff = if metrics.exists() {
        let old = parse_metrics_csv(&read_text(&metrics)?)?;
        if old.len() != rows.len() {
            Some(f64::INFINITY)
        } else {
            Some(old.iter().zip(&rows).fold(0.0f64, |m, (a, b)| {
                let same = a.gate == b.gate && a.segment == b.segment && a.cache_bytes == b.cache_bytes;
                let d = diff(a.bg_mse_vs_source, b.bg_mse_vs_source).max(diff(a.subject_iou, b.subject_iou));
                m.max(if same { d } else { f64::INFINITY })
            }))
        }
    } else {
        None
    };
    let csv = metrics_csv(&rows);
    Ok(EvalReport { rows, csv, max_diff })
}

pub fn run(s: &Settings) -> Result<EvalReport> {
    let report = evaluate(&s.path("run")?)?;
    if let Some(out) = s.opt_path("out") {
        generate::write_text(&out, &report.csv)?;
        s.write(&super::train::config_path(&out))?;
    }
    Ok(report)
}
