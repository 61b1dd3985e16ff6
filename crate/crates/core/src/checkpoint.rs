//! "PGCK" container: named f32 tensors and text entries in one file.
//!
//! Layout (little endian): magic `PGCK`, `u32` version, `u32` entry count,
//! then per entry a `u32`-prefixed UTF-8 name, a kind byte and the payload.
//! Tensors store a `u32` rank, `u64` extents and raw `f32` values; text
//! stores `u32`-prefixed bytes. Entries are written in name order so equal
//! contents give equal bytes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"PGCK";
pub const VERSION: u32 = 1;

const KIND_TENSOR: u8 = 0;
const KIND_TEXT: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    Tensor(Tensor),
    Text(String),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    entries: BTreeMap<String, Entry>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| format_err(format!("container truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| format_err("entry text is not UTF-8"))
    }
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert_tensor(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), Entry::Tensor(t));
    }

    pub fn insert_text(&mut self, name: impl Into<String>, s: impl Into<String>) {
        self.entries.insert(name.into(), Entry::Text(s.into()));
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        match self.entries.get(name) {
            Some(Entry::Tensor(t)) => Ok(t),
            Some(Entry::Text(_)) => Err(format_err(format!("entry {name} is text, not a tensor"))),
            None => Err(format_err(format!("missing entry {name}"))),
        }
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match self.entries.get(name) {
            Some(Entry::Text(s)) => Ok(s),
            Some(Entry::Tensor(_)) => Err(format_err(format!("entry {name} is a tensor, not text"))),
            None => Err(format_err(format!("missing entry {name}"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Entry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.entries
            .range(prefix.to_string()..)
            .map(|(k, _)| k.as_str())
            .take_while(move |k| k.starts_with(prefix))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, e) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match e {
                Entry::Tensor(t) => {
                    out.push(KIND_TENSOR);
                    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
                    for &d in t.shape() {
                        out.extend_from_slice(&(d as u64).to_le_bytes());
                    }
                    for v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Entry::Text(s) => {
                    out.push(KIND_TEXT);
                    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                    out.extend_from_slice(s.as_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4).ok() != Some(&MAGIC[..]) {
            return Err(format_err("not a PGCK container (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format_err(format!("unsupported PGCK version {version}")));
        }
        let count = r.u32()?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name = r.string()?;
            let entry = match r.u8()? {
                KIND_TENSOR => {
                    let rank = r.u32()? as usize;
                    let shape = (0..rank)
                        .map(|_| r.u64().map(|d| d as usize))
                        .collect::<Result<Vec<_>>>()?;
                    let n = shape
                        .iter()
                        .try_fold(1usize, |a, &d| a.checked_mul(d))
                        .filter(|&n| n <= buf.len() / 4)
                        .ok_or_else(|| format_err(format!("entry {name} has an implausible shape {shape:?}")))?;
                    let raw = r.take(n * 4)?;
                    let data = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Entry::Tensor(Tensor::new(shape, data)?)
                }
                KIND_TEXT => Entry::Text(r.string()?),
                k => return Err(format_err(format!("entry {name} has unknown kind {k}"))),
            };
            if entries.insert(name.clone(), entry).is_some() {
                return Err(format_err(format!("duplicate entry {name}")));
            }
        }
        if r.pos != buf.len() {
            return Err(format_err("trailing bytes after last entry"));
        }
        Ok(Self { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_rejects() {
        let mut c = Container::new();
        c.insert_tensor("b/x", Tensor::new(vec![2, 3], (0..6).map(|i| i as f32 - 2.5).collect()).unwrap());
        c.insert_tensor("a", Tensor::scalar(1.0));
        c.insert_text("meta/role", "base");
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.text("meta/role").unwrap(), "base");
        assert!(back.tensor("meta/role").is_err());
        assert_eq!(back.names_with_prefix("b/").collect::<Vec<_>>(), vec!["b/x"]);
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Container::from_bytes(b"NOPE").is_err());
    }
}
