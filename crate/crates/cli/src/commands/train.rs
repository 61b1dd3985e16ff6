use std::path::{Path, PathBuf};

use posegen_core::dit::{DitConfig, DitModel};
use posegen_core::synth::load_dataset;
use posegen_core::trainer::{loss_csv, prepare_examples, train, Checkpoint, TrainConfig};
use posegen_core::{Error, Result};

use crate::config::Settings;

use super::codec_for;

pub fn defaults() -> Settings {
    let t = TrainConfig::default();
    let mut pairs: Vec<(String, String)> = [
        ("role", t.role.to_string()),
        ("data", String::new()),
        ("steps", t.steps.to_string()),
        ("batch_size", t.batch_size.to_string()),
        ("peak_lr", t.peak_lr.to_string()),
        ("hand_dropout", t.hand_dropout.to_string()),
        ("retain_ratio", t.retain_ratio.to_string()),
        ("seed", t.seed.to_string()),
        ("warm_start", String::new()),
        ("out", String::new()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    pairs.extend(
        DitConfig::default()
            .to_pairs()
            .into_iter()
            .map(|(k, v)| (format!("model.{k}"), v)),
    );
    Settings::new("train", pairs)
}

pub fn model_config(s: &Settings) -> Result<DitConfig> {
    let mut cfg = DitConfig::default();
    for (k, _) in DitConfig::default().to_pairs() {
        cfg.set(k, s.raw(&format!("model.{k}")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Loss curve path for a checkpoint path.
pub fn loss_path(ckpt: &Path) -> PathBuf {
    let mut p = ckpt.as_os_str().to_owned();
    p.push(".loss.csv");
    PathBuf::from(p)
}

pub fn config_path(ckpt: &Path) -> PathBuf {
    let mut p = ckpt.as_os_str().to_owned();
    p.push(".cfg");
    PathBuf::from(p)
}

pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

/// Trains one role and writes the checkpoint, its loss curve and the
/// resolved config next to it.
pub fn run(s: &Settings) -> Result<TrainOutput> {
    let out = s.path("out")?;
    let cfg = TrainConfig {
        role: s.get("role")?,
        steps: s.get("steps")?,
        batch_size: s.get("batch_size")?,
        peak_lr: s.get("peak_lr")?,
        hand_dropout: s.get("hand_dropout")?,
        retain_ratio: s.get("retain_ratio")?,
        seed: s.get("seed")?,
    };
    cfg.validate()?;
    let model_cfg = model_config(s)?;
    let codec = codec_for(&model_cfg)?;
    let samples = load_dataset(&s.path("data")?)?;
    let examples = prepare_examples(&samples, &codec, cfg.role, cfg.retain_ratio)?;
    let mut model = DitModel::new(model_cfg)?;
    if let Some(warm) = s.opt_path("warm_start") {
        Checkpoint::read(&warm)?
            .apply_to(&mut model)
            .map_err(|e| Error::Config(format!("warm start {}: {e}", warm.display())))?;
    }
    let rows = train(&mut model, &examples, &cfg)?;
    let checkpoint = Checkpoint::from_model(&model, cfg.role, cfg.steps);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    checkpoint.write(&out)?;
    let lp = loss_path(&out);
    std::fs::write(&lp, loss_csv(&rows)).map_err(|e| Error::io(&lp, e))?;
    s.write(&config_path(&out))?;
    let window = (rows.len() / 10).max(1);
    let ends = posegen_core::trainer::smoothed_ends(&rows, window);
    Ok(TrainOutput {
        checkpoint,
        initial_loss: ends.map(|e| e.0),
        final_loss: ends.map(|e| e.1),
    })
}
