use std::collections::BTreeMap;
use std::ops::Range;

use crate::error::{config_err, Error, Result};
use crate::numerics::Rng;
use crate::ppm::{format_kv, parse_kv};
use crate::sampler::retain_count;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegmentKind {
    Key,
    Stitch,
}

impl std::fmt::Display for SegmentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Key => "key",
            Self::Stitch => "stitch",
        })
    }
}

impl std::str::FromStr for SegmentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "key" => Ok(Self::Key),
            "stitch" => Ok(Self::Stitch),
            _ => Err(Error::Format(format!("unknown segment kind {s:?}"))),
        }
    }
}

/// One generated segment. It covers global frames `start..start + F`; the
/// frame before `start` is generated as leading context and discarded.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub kind: SegmentKind,
    pub start: usize,
    /// Global frames this segment contributes to the output.
    pub emit: Range<usize>,
    pub seed: u64,
}

impl Segment {
    pub fn end(&self, f_seg: usize) -> usize {
        self.start + f_seg
    }

    /// Local frame index (0 = leading frame) of global frame `g`.
    pub fn local(&self, g: usize) -> usize {
        g + 1 - self.start
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentPlan {
    pub total_frames: usize,
    pub f_seg: usize,
    pub retain_ratio: f64,
    /// Frames shared between a stitch and each neighbouring key.
    pub q: usize,
    /// Ordinal of the key segment whose keys and values are shared.
    pub source_key: usize,
    /// The final key segment is cut short by the end of the video.
    pub shortened: bool,
    /// Keys at even positions, stitches between them.
    pub segments: Vec<Segment>,
}

/// Interleaved plan: keys every `2F - 2q` frames, each stitch overlapping
/// the last `q` frames of its left key and the first `q` of its right key
/// and contributing the `F - 2q` frames between them.
pub fn plan_segments(total_frames: usize, f_seg: usize, retain_ratio: f64, seed: u64) -> Result<SegmentPlan> {
    if total_frames == 0 || f_seg == 0 {
        return Err(config_err!("plan needs positive total and segment lengths"));
    }
    let q = retain_count(f_seg, retain_ratio);
    if 2 * q >= f_seg {
        return Err(config_err!(
            "segments of {f_seg} frames retaining {q} at each end leave nothing to stitch"
        ));
    }
    let period = 2 * f_seg - 2 * q;
    let keys = if total_frames <= f_seg {
        1
    } else {
        (total_frames - f_seg).div_ceil(period) + 1
    };
    let root = Rng::new(seed);
    let mut segments = Vec::with_capacity(2 * keys - 1);
    for k in 0..keys {
        let start = k * period;
        segments.push((SegmentKind::Key, start, start..start + f_seg));
        if k + 1 < keys {
            let s = start + f_seg - q;
            segments.push((SegmentKind::Stitch, s, start + f_seg..start + period));
        }
    }
    let segments = segments
        .into_iter()
        .enumerate()
        .map(|(i, (kind, start, emit))| Segment {
            kind,
            start,
            emit: emit.start.min(total_frames)..emit.end.min(total_frames),
            seed: root.split(i as u64 + 1).next_u64(),
        })
        .collect();
    Ok(SegmentPlan {
        total_frames,
        f_seg,
        retain_ratio,
        q,
        source_key: 0,
        shortened: (keys - 1) * period + f_seg > total_frames,
        segments,
    })
}

impl SegmentPlan {
    pub fn key_count(&self) -> usize {
        self.segments.len().div_ceil(2)
    }

    pub fn source_index(&self) -> usize {
        2 * self.source_key
    }

    pub fn with_source_key(mut self, k: usize) -> Result<Self> {
        if k >= self.key_count() {
            return Err(config_err!("source key {k} outside plan of {} keys", self.key_count()));
        }
        self.source_key = k;
        Ok(self)
    }

    /// Segment emitting global frame `g`.
    pub fn owner(&self, g: usize) -> Option<usize> {
        self.segments.iter().position(|s| s.emit.contains(&g))
    }

    pub fn to_manifest(&self) -> String {
        let mut pairs = vec![
            ("total_frames".to_string(), self.total_frames.to_string()),
            ("f_seg".to_string(), self.f_seg.to_string()),
            ("retain_ratio".to_string(), self.retain_ratio.to_string()),
            ("q".to_string(), self.q.to_string()),
            ("source_key".to_string(), self.source_key.to_string()),
            ("shortened".to_string(), self.shortened.to_string()),
            ("segments".to_string(), self.segments.len().to_string()),
        ];
        for (i, s) in self.segments.iter().enumerate() {
            let p = format!("segment.{i:03}");
            pairs.push((format!("{p}.kind"), s.kind.to_string()));
            pairs.push((format!("{p}.start"), s.start.to_string()));
            pairs.push((format!("{p}.end"), s.end(self.f_seg).to_string()));
            pairs.push((format!("{p}.emit_start"), s.emit.start.to_string()));
            pairs.push((format!("{p}.emit_end"), s.emit.end.to_string()));
            pairs.push((format!("{p}.seed"), s.seed.to_string()));
        }
        format_kv(pairs.iter().map(|(k, v)| (k.as_str(), v.clone())))
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let map: BTreeMap<String, String> = parse_kv(text)?;
        fn get<T: std::str::FromStr>(map: &BTreeMap<String, String>, k: &str) -> Result<T> {
            let v = map.get(k).ok_or_else(|| Error::Format(format!("manifest lacks {k}")))?;
            v.parse().map_err(|_| Error::Format(format!("manifest {k}: bad value {v:?}")))
        }
        let n: usize = get(&map, "segments")?;
        let segments = (0..n)
            .map(|i| {
                let p = format!("segment.{i:03}");
                Ok(Segment {
                    kind: map
                        .get(&format!("{p}.kind"))
                        .ok_or_else(|| Error::Format(format!("manifest lacks {p}.kind")))?
                        .parse()?,
                    start: get(&map, &format!("{p}.start"))?,
                    emit: get(&map, &format!("{p}.emit_start"))?..get(&map, &format!("{p}.emit_end"))?,
                    seed: get(&map, &format!("{p}.seed"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            total_frames: get(&map, "total_frames")?,
            f_seg: get(&map, "f_seg")?,
            retain_ratio: get(&map, "retain_ratio")?,
            q: get(&map, "q")?,
            source_key: get(&map, "source_key")?,
            shortened: get(&map, "shortened")?,
            segments,
        })
    }
}
