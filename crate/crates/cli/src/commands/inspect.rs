use std::fmt::Write as _;

use posegen_core::kv_share::KvCache;
use posegen_core::numerics::Tensor;
use posegen_core::ppm::write_ppm;
use posegen_core::{Error, Result};

use crate::config::Settings;

use super::generate::read_cache;

/// Pixels per token side in the heat image.
const CELL: usize = 8;

pub fn defaults() -> Settings {
    Settings::new(
        "inspect",
        [
            ("cache", String::new()),
            ("layer", "0".into()),
            ("timestep", "0".into()),
            ("out", String::new()),
        ],
    )
}

pub fn report(cache: &KvCache) -> String {
    let g = cache.gate();
    let mut s = String::new();
    writeln!(s, "{} entries", cache.len()).unwrap();
    writeln!(s, "gate k_t={} k_l={} steps={} layers={}", g.k_t, g.k_l, g.steps, g.layers).unwrap();
    writeln!(s, "bytes {}", cache.bytes()).unwrap();
    writeln!(s, "digest {:016x}", cache.digest()).unwrap();
    for ((l, t), e) in cache.entries() {
        writeln!(
            s,
            "layer {l} timestep {t}: {} of {} tokens subject",
            e.mask.count(),
            e.mask.len()
        )
        .unwrap();
    }
    s
}

/// Mean of the selected source masks drawn as a heat image: latent frames
/// side by side, one `CELL`-pixel square per token.
pub fn heat_image(masks: &[&Tensor], grid: (usize, usize, usize)) -> Result<Tensor> {
    let (f, h, w) = grid;
    let (hp, wp) = (h / 2, w / 2);
    let n = f * hp * wp;
    if masks.is_empty() || masks.iter().any(|m| m.len() != n) {
        return Err(Error::Format(format!("masks do not fit a {f}×{h}×{w} latent grid")));
    }
    let (ih, iw) = (hp * CELL, f * wp * CELL);
    let mut img = vec![0.0f32; 3 * ih * iw];
    for j in 0..f {
        for y in 0..hp {
            for x in 0..wp {
                let tok = (j * hp + y) * wp + x;
                let v = masks.iter().map(|m| m.data()[tok]).sum::<f32>() / masks.len() as f32;
                let rgb = [(3.0 * v).min(1.0), (3.0 * v - 1.0).clamp(0.0, 1.0), (3.0 * v - 2.0).clamp(0.0, 1.0)];
                for py in y * CELL..(y + 1) * CELL {
                    for px in (j * wp + x) * CELL..(j * wp + x + 1) * CELL {
                        for (c, &val) in rgb.iter().enumerate() {
                            img[(c * ih + py) * iw + px] = val;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![3, ih, iw], img)
}

/// Prints cache statistics and optionally writes the mask heat image.
pub fn run(s: &Settings) -> Result<String> {
    let path = s.path("cache")?;
    let (cache, grid) = read_cache(&path)?;
    let mut text = report(&cache);
    let (layer, timestep): (usize, usize) = (s.get("layer")?, s.get("timestep")?);
    let selected: Vec<&Tensor> = cache
        .entries()
        .filter(|((l, t), _)| (layer == 0 || *l == layer) && (timestep == 0 || *t == timestep))
        .map(|(_, e)| &e.mask.values)
        .collect();
    if (layer != 0 || timestep != 0) && selected.is_empty() {
        return Err(Error::Usage(format!(
            "cache has no entry at layer {layer} timestep {timestep} (0 = any)"
        )));
    }
    if let Some(out) = s.opt_path("out") {
        if selected.is_empty() {
            writeln!(text, "no masks to draw").unwrap();
        } else {
            let grid = grid.ok_or_else(|| Error::Format(format!("{} lacks its latent grid", path.display())))?;
            write_ppm(&out, &heat_image(&selected, grid)?)?;
            writeln!(text, "heat image of {} masks written to {}", selected.len(), out.display()).unwrap();
        }
        s.write(&super::train::config_path(&out))?;
    }
    Ok(text)
}
