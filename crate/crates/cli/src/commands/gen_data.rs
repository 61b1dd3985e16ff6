use std::path::PathBuf;

use posegen_core::synth::{export_dataset, make_dataset, SynthConfig};
use posegen_core::Result;

use crate::config::{parse_size, Settings};

pub fn defaults() -> Settings {
    Settings::new(
        "gen-data",
        [
            ("scenes", "8".into()),
            ("frames", "17".into()),
            ("size", "64x64".into()),
            ("seed", "0".into()),
            ("out", String::new()),
        ],
    )
}

/// Writes `scene_*` directories plus the resolved config under `out`.
pub fn run(s: &Settings) -> Result<PathBuf> {
    let out = s.path("out")?;
    let (height, width) = parse_size(s.raw("size"))?;
    let cfg = SynthConfig {
        frames: s.get("frames")?,
        height,
        width,
    };
    let samples = make_dataset(s.get("scenes")?, cfg, s.get("seed")?)?;
    export_dataset(&out, &samples)?;
    s.write(&out.join("resolved.cfg"))?;
    Ok(out)
}
