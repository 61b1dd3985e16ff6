//! Flat `key=value` run configuration: built-in defaults, overridden by a
//! config file, overridden by `--set` pairs and command-line flags.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use posegen_core::ppm::{format_kv, parse_kv};
use posegen_core::{Error, Result};

pub const RESOLVED_HEADER: &str = "# posegen resolved config";

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    command: &'static str,
    values: BTreeMap<String, String>,
}

impl Settings {
    /// Starts from the command's defaults. Every key a command accepts
    /// must appear here; anything else is rejected.
    pub fn new<K: Into<String>>(command: &'static str, defaults: impl IntoIterator<Item = (K, String)>) -> Self {
        Self {
            command,
            values: defaults.into_iter().map(|(k, v)| (k.into(), v)).collect(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.into();
                Ok(())
            }
            None => Err(Error::Config(format!(
                "unknown key {key:?} for {}; known keys: {}",
                self.command,
                self.values.keys().cloned().collect::<Vec<_>>().join(", ")
            ))),
        }
    }

    pub fn set_opt<T: Display>(&mut self, key: &str, value: Option<T>) -> Result<()> {
        match value {
            Some(v) => self.set(key, v.to_string()),
            None => Ok(()),
        }
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (k, v) in parse_kv(&text)? {
            self.set(&k, v)?;
        }
        Ok(())
    }

    /// Applies `key=value` strings from `--set`.
    pub fn apply_pairs(&mut self, pairs: &[String]) -> Result<()> {
        for p in pairs {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("--set expects key=value, got {p:?}")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("{key} is not a {} key", self.command))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key);
        v.parse()
            .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
    }

    /// A path value that must be present.
    pub fn path(&self, key: &str) -> Result<PathBuf> {
        self.opt_path(key)
            .ok_or_else(|| Error::Usage(format!("{} needs {key}", self.command)))
    }

    pub fn opt_path(&self, key: &str) -> Option<PathBuf> {
        let v = self.raw(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    /// Every key except `out` in sorted order, with a header naming the
    /// command. The file is written beside the outputs, so leaving the
    /// output location out keeps reruns into another place byte-identical.
    pub fn to_text(&self) -> String {
        format!(
            "{RESOLVED_HEADER}\n# command={}\n{}",
            self.command,
            format_kv(
                self.values
                    .iter()
                    .filter(|(k, _)| k.as_str() != "out")
                    .map(|(k, v)| (k.as_str(), v.clone()))
            )
        )
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// `HxW`.
pub fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s
        .split_once('x')
        .ok_or_else(|| Error::Config(format!("size must be HxW, got {s:?}")))?;
    let p = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("size must be HxW, got {s:?}")))
    };
    Ok((p(h)?, p(w)?))
}

/// Comma-separated list of integers.
pub fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| Error::Config(format!("expected comma-separated integers, got {s:?}")))
        })
        .collect()
}
