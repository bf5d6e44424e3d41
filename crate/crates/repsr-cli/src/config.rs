//! Flat `key=value` config files for the `train` subcommand.
//!
//! One assignment per line; `#` starts a comment; blank lines are ignored.
//! Keys are spelled exactly like the corresponding long flag (`batch-size`,
//! `width-multiplier`, ...), and a flag given on the command line always
//! wins over the file. Unknown keys are an error rather than a silent no-op,
//! so a typo cannot quietly fall back to a default.

use repsr::{Error, Result};
use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

/// Parsed config file: an ordered key → raw-string map.
#[derive(Debug, Default)]
pub struct ConfigFile {
    entries: BTreeMap<String, String>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::InvalidArgument {
        op: "config file",
        msg: msg.into(),
    }
}

impl ConfigFile {
    /// No file given: every lookup misses.
    pub fn empty() -> Self {
        ConfigFile::default()
    }

    /// Read and parse a file. Duplicate keys are an error.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {}: expected key=value, got `{line}`", lineno + 1)))?;
            let (key, value) = (key.trim().to_string(), value.trim().to_string());
            if key.is_empty() {
                return Err(bad(format!("line {}: empty key", lineno + 1)));
            }
            if entries.insert(key.clone(), value).is_some() {
                return Err(bad(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
        }
        Ok(ConfigFile { entries })
    }

    /// Reject any key outside the known set.
    pub fn check_keys(&self, known: &[&str]) -> Result<()> {
        for key in self.entries.keys() {
            if !known.contains(&key.as_str()) {
                return Err(bad(format!(
                    "unknown key `{key}` (known keys: {})",
                    known.join(", ")
                )));
            }
        }
        Ok(())
    }

    /// Look up and parse one value; `Ok(None)` when the key is absent.
    pub fn get<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|e| bad(format!("key `{key}`: {e}"))),
        }
    }
}

/// Command-line flag if present, else the config-file value, else `None`.
pub fn pick<T>(flag: Option<T>, cfg: &ConfigFile, key: &str) -> Result<Option<T>>
where
    T: FromStr,
    T::Err: Display,
{
    match flag {
        Some(v) => Ok(Some(v)),
        None => cfg.get(key),
    }
}
