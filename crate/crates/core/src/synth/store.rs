//! Scene directories: `video/`, `pose/`, `hand/`, `masks/` frame folders,
//! `reference.ppm` and a `meta.txt` of key=value lines.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::ppm::{self, format_kv, parse_kv};

use super::{Appearance, PoseFrame, Sample, SceneSpec};

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub fn export_sample(dir: &Path, s: &Sample) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    ppm::write_video(&dir.join("video"), &s.video)?;
    ppm::write_video(&dir.join("pose"), &s.pose)?;
    ppm::write_video(&dir.join("hand"), &s.hand)?;
    ppm::write_masks(&dir.join("masks"), &s.gt_subject_mask)?;
    ppm::write_ppm(&dir.join("reference.ppm"), &s.reference)?;
    let (f, h, w) = s.dims();
    let a = &s.spec.appearance;
    let mut pairs: Vec<(String, String)> = vec![
        ("seed".into(), s.spec.seed.to_string()),
        ("frames".into(), f.to_string()),
        ("height".into(), h.to_string()),
        ("width".into(), w.to_string()),
        ("background_id".into(), s.spec.background_id.to_string()),
        ("caption".into(), join(&s.spec.caption_tokens)),
        ("subject_indices".into(), join(&s.spec.subject_token_indices)),
        ("clamped".into(), s.clamped.to_string()),
        ("torso_color".into(), join(&a.torso_color)),
        ("arm_color".into(), join(&a.arm_color)),
        ("head_color".into(), join(&a.head_color)),
        ("torso_len".into(), a.torso_len.to_string()),
        ("upper_arm".into(), a.upper_arm.to_string()),
        ("forearm".into(), a.forearm.to_string()),
        ("head_radius".into(), a.head_radius.to_string()),
        ("thickness".into(), a.thickness.to_string()),
        ("anchor".into(), join(&a.anchor)),
    ];
    for (i, m) in s.spec.motion.iter().enumerate() {
        pairs.push((format!("motion.{i:05}"), join(&m.to_array())));
    }
    let text = format_kv(pairs.iter().map(|(k, v)| (k.as_str(), v.clone())));
    let meta = dir.join("meta.txt");
    fs::write(&meta, text).map_err(|e| Error::io(&meta, e))?;
    Ok(())
}

struct Meta<'a> {
    map: BTreeMap<String, String>,
    path: &'a Path,
}

impl Meta<'_> {
    fn raw(&self, key: &str) -> Result<&str> {
        self.map
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("{}: missing key {key}", self.path.display())))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key)?;
        v.parse()
            .map_err(|_| Error::Format(format!("{}: bad value {v:?} for {key}", self.path.display())))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let v = self.raw(key)?;
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|x| {
                x.trim().parse().map_err(|_| {
                    Error::Format(format!("{}: bad list {v:?} for {key}", self.path.display()))
                })
            })
            .collect()
    }

    fn fixed<const N: usize>(&self, key: &str) -> Result<[f32; N]> {
        let v: Vec<f32> = self.list(key)?;
        v.try_into().map_err(|_| {
            Error::Format(format!("{}: {key} needs {N} values", self.path.display()))
        })
    }
}

pub fn load_sample(dir: &Path) -> Result<Sample> {
    let meta_path = dir.join("meta.txt");
    let meta = Meta {
        map: parse_kv(&fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?)?,
        path: &meta_path,
    };
    let frames: usize = meta.get("frames")?;
    let motion = (0..frames)
        .map(|i| meta.fixed::<{ PoseFrame::FIELDS }>(&format!("motion.{i:05}")).map(PoseFrame::from_array))
        .collect::<Result<Vec<_>>>()?;
    let spec = SceneSpec {
        seed: meta.get("seed")?,
        appearance: Appearance {
            torso_color: meta.fixed("torso_color")?,
            arm_color: meta.fixed("arm_color")?,
            head_color: meta.fixed("head_color")?,
            torso_len: meta.get("torso_len")?,
            upper_arm: meta.get("upper_arm")?,
            forearm: meta.get("forearm")?,
            head_radius: meta.get("head_radius")?,
            thickness: meta.get("thickness")?,
            anchor: meta.fixed("anchor")?,
        },
        motion,
        background_id: meta.get("background_id")?,
        caption_tokens: meta.list("caption")?,
        subject_token_indices: meta.list("subject_indices")?,
    };
    spec.validate()
        .map_err(|e| Error::Format(format!("{}: {e}", meta_path.display())))?;
    let sample = Sample {
        video: ppm::read_video(&dir.join("video"))?,
        pose: ppm::read_video(&dir.join("pose"))?,
        hand: ppm::read_video(&dir.join("hand"))?,
        reference: ppm::read_ppm(&dir.join("reference.ppm"))?,
        gt_subject_mask: ppm::read_masks(&dir.join("masks"))?,
        spec,
        clamped: meta.get("clamped")?,
    };
    let dims = (frames, meta.get("height")?, meta.get("width")?);
    let (_, h, w) = dims;
    let consistent = sample.video.dims() == dims
        && sample.pose.dims() == dims
        && sample.hand.dims() == dims
        && sample.gt_subject_mask.shape() == [dims.0, h, w]
        && sample.reference.shape() == [3, h, w];
    if !consistent {
        return Err(Error::Format(format!(
            "{}: stream sizes disagree with meta.txt ({}x{}x{})",
            dir.display(),
            dims.0,
            h,
            w
        )));
    }
    Ok(sample)
}

pub fn scene_dir(root: &Path, i: usize) -> PathBuf {
    root.join(format!("scene_{i:05}"))
}

pub fn export_dataset(root: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for (i, s) in samples.iter().enumerate() {
        export_sample(&scene_dir(root, i), s)?;
    }
    Ok(())
}

/// Loads every `scene_*` directory under `root` in name order.
pub fn load_dataset(root: &Path) -> Result<Vec<Sample>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root).map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .is_some_and(|n| n.to_string_lossy().starts_with("scene_"))
        })
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Format(format!("{}: no scene directories", root.display())));
    }
    dirs.iter().map(|d| load_sample(d)).collect()
}
