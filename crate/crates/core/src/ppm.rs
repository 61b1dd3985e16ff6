//! Binary PPM (P6) frames and a small key=value text format.
//!
//! Frames are stored at 8 bits per channel. Values produced by [`snap`]
//! survive a write/read round trip bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::codec::PixelVideo;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Nearest 8-bit level of a value clamped to `[0, 1]`.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn level(q: u8) -> f32 {
    q as f32 / 255.0
}

/// Snaps a value onto the 8-bit grid used by stored frames.
pub fn snap(v: f32) -> f32 {
    level(quantize(v))
}

pub fn snap_tensor(t: &Tensor) -> Tensor {
    t.map(snap)
}

/// Encodes a `3 × H × W` frame.
pub fn encode_ppm(frame: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match frame.shape() {
        [3, h, w] => (*h, *w),
        s => return Err(Error::Shape(format!("ppm frame must be 3×H×W, got {s:?}"))),
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let d = frame.data();
    out.reserve(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            out.push(quantize(d[ch * plane + i]));
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated ppm header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if fields[0] != "P6" {
        return Err(Error::Format(format!("expected P6, found {:?}", fields[0])));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad ppm header field {s:?}")))
    };
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(Error::Format(format!("unsupported ppm maxval {max}")));
    }
    let plane = h * w;
    let raster = bytes
        .get(pos..pos + 3 * plane)
        .ok_or_else(|| Error::Format(format!("ppm raster shorter than {w}x{h}")))?;
    let mut data = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        for ch in 0..3 {
            data[ch * plane + i] = level(raster[3 * i + ch]);
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn write_ppm(path: &Path, frame: &Tensor) -> Result<()> {
    fs::write(path, encode_ppm(frame)?).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn frame_name(i: usize) -> String {
    format!("{i:05}.ppm")
}

/// Writes every frame as `DIR/00000.ppm`, `DIR/00001.ppm`, ...
pub fn write_video(dir: &Path, video: &PixelVideo) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for f in 0..video.num_frames() {
        write_ppm(&dir.join(frame_name(f)), &video.frame(f))?;
    }
    Ok(())
}

pub fn read_video(dir: &Path) -> Result<PixelVideo> {
    let mut names: Vec<_> = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".ppm"))
        .collect();
    names.sort();
    let frames = names
        .iter()
        .map(|n| read_ppm(&dir.join(n)))
        .collect::<Result<Vec<_>>>()?;
    PixelVideo::from_frames(&frames)
        .map_err(|e| Error::Format(format!("{}: {e}", dir.display())))
}

/// Binary `F × H × W` masks stored as black/white frames.
pub fn write_masks(dir: &Path, masks: &Tensor) -> Result<()> {
    let [f, h, w] = *masks.shape() else {
        return Err(Error::Shape(format!("mask stack must be F×H×W, got {:?}", masks.shape())));
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let plane = h * w;
    for i in 0..f {
        let m = &masks.data()[i * plane..(i + 1) * plane];
        let mut rgb = Vec::with_capacity(3 * plane);
        for _ in 0..3 {
            rgb.extend_from_slice(m);
        }
        write_ppm(&dir.join(frame_name(i)), &Tensor::new(vec![3, h, w], rgb)?)?;
    }
    Ok(())
}

pub fn read_masks(dir: &Path) -> Result<Tensor> {
    let video = read_video(dir)?;
    let (f, h, w) = video.dims();
    let red = &video.frames.data()[..f * h * w];
    Tensor::new(vec![f, h, w], red.iter().map(|&v| (v > 0.5) as u8 as f32).collect())
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn format_kv<'a>(pairs: impl IntoIterator<Item = (&'a str, String)>) -> String {
    let mut s = String::new();
    for (k, v) in pairs {
        s.push_str(k);
        s.push('=');
        s.push_str(&v);
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn snapped_frames_round_trip_exactly() {
        let mut rng = Rng::new(9);
        let t = snap_tensor(&rng.uniform_tensor(&[3, 5, 7], 0.0, 1.0));
        let back = decode_ppm(&encode_ppm(&t).unwrap()).unwrap();
        assert!(back.bit_eq(&t));
    }

    #[test]
    fn header_comments_and_errors() {
        let mut bytes = b"P6\n# note\n1 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 51]);
        let t = decode_ppm(&bytes).unwrap();
        assert_eq!(t.data(), &[1.0, 0.0, 0.2]);
        assert!(decode_ppm(b"P5\n1 1\n255\n\0").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\0\0\0").is_err());
    }

    #[test]
    fn kv_parsing() {
        let m = parse_kv("# c\na = 1\n\nb=x=y\n").unwrap();
        assert_eq!(m["a"], "1");
        assert_eq!(m["b"], "x=y");
        assert!(parse_kv("nonsense").is_err());
    }
}
