use std::fmt::Write as _;
use std::path::PathBuf;

use posegen_core::kv_share::Gate;
use posegen_core::long_video::SegmentKind;
use posegen_core::metrics::{metrics_csv, MetricRow};
use posegen_core::{Error, Result};

use crate::config::{parse_list, Settings};

use super::generate::{self, generate, load_inputs, write_text, GenParams, CONFIG_FILE, METRICS_FILE};

pub const SWEEP_FILE: &str = "sweep.csv";
pub const SWEEP_HEADER: &str = "# posegen sweep v1";
pub const SWEEP_COLUMNS: &str = "gate,k_t,k_l,bg_mse_keys,bg_mse_stitches,subject_iou,cache_bytes";

pub fn defaults() -> Settings {
    let pairs: Vec<(String, String)> = generate::defaults()
        .pairs()
        .filter(|(k, _)| *k != "gate")
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .chain([("k_t".to_string(), "auto".to_string()), ("k_l".to_string(), "auto".to_string())])
        .collect();
    Settings::new("sweep", pairs)
}

/// `0`, `1`, the default and the full count, without repeats.
fn auto_grid(default: usize, full: usize) -> Vec<usize> {
    let mut v = vec![0, 1, default, full];
    v.sort_unstable();
    v.dedup();
    v
}

fn grid(spec: &str, default: usize, full: usize) -> Result<Vec<usize>> {
    if spec == "auto" {
        Ok(auto_grid(default, full))
    } else {
        parse_list(spec)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub k_t: usize,
    pub k_l: usize,
    pub bg_mse_keys: f64,
    pub bg_mse_stitches: f64,
    pub subject_iou: f64,
    pub cache_bytes: usize,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Summarises one run: background MSE averaged over the non-source key
/// segments and over the stitches, subject IoU over every segment.
pub fn summarise(k_t: usize, k_l: usize, source: usize, rows: &[MetricRow]) -> Cell {
    let pick = |kind| {
        rows.iter()
            .filter(move |r| r.kind == kind && r.segment != source)
            .map(|r| r.bg_mse_vs_source)
    };
    Cell {
        k_t,
        k_l,
        bg_mse_keys: mean(pick(SegmentKind::Key)),
        bg_mse_stitches: mean(pick(SegmentKind::Stitch)),
        subject_iou: mean(rows.iter().map(|r| r.subject_iou)),
        cache_bytes: rows.first().map_or(0, |r| r.cache_bytes),
    }
}

pub fn sweep_csv(cells: &[Cell]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n{SWEEP_COLUMNS}\n");
    for c in cells {
        writeln!(
            s,
            "{}/{},{},{},{},{},{},{}",
            c.k_t, c.k_l, c.k_t, c.k_l, c.bg_mse_keys, c.bg_mse_stitches, c.subject_iou, c.cache_bytes
        )
        .unwrap();
    }
    s
}

/// Generates the same long video once per `(k_t, k_l)` cell and writes
/// per-cell summaries plus every per-segment row.
pub fn run(s: &Settings) -> Result<(PathBuf, Vec<Cell>)> {
    let out = s.path("out")?;
    let mut g = generate::defaults();
    for (k, v) in s.pairs() {
        if k != "k_t" && k != "k_l" {
            g.set(k, v)?;
        }
    }
    let inputs = load_inputs(&g)?;
    let params = GenParams::from_settings(&g)?;
    let layers = inputs.base.config().layers;
    let d = Gate::default_for(params.steps, layers)?;
    let kts = grid(s.raw("k_t"), d.k_t, params.steps)?;
    let kls = grid(s.raw("k_l"), d.k_l, layers)?;
    if kts.is_empty() || kls.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let source = 2 * params.source_key;
    let mut cells = Vec::new();
    let mut rows = Vec::new();
    for &k_t in &kts {
        for &k_l in &kls {
            let r = generate(&inputs, &params, (k_t, k_l))?;
            cells.push(summarise(k_t, k_l, source, &r.rows));
            rows.extend(r.rows);
        }
    }
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_text(&out.join(SWEEP_FILE), &sweep_csv(&cells))?;
    write_text(&out.join(METRICS_FILE), &metrics_csv(&rows))?;
    s.write(&out.join(CONFIG_FILE))?;
    Ok((out, cells))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auto_grids_are_sorted_and_unique() {
        assert_eq!(auto_grid(5, 20), vec![0, 1, 5, 20]);
        assert_eq!(auto_grid(1, 1), vec![0, 1]);
        assert_eq!(grid("2,3", 1, 4).unwrap(), vec![2, 3]);
    }
}
