//! Flat `key=value` configuration records.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Ordered key/value map parsed from `key=value` lines. Blank lines and lines
/// starting with `#` are skipped.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvFile {
    source: String,
    entries: BTreeMap<String, String>,
}

impl KvFile {
    pub fn parse(source: &str, text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(source, n + 1, "expected key=value"))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::parse(source, n + 1, "empty key"));
            }
            if entries.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::parse(source, n + 1, format!("duplicate key {k}")));
            }
        }
        Ok(Self {
            source: source.to_string(),
            entries,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&path.display().to_string(), &text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Reject any key not in `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        match self.entries.keys().find(|k| !known.contains(&k.as_str())) {
            Some(k) => Err(Error::config(format!("unknown key `{k}` in {}", self.source))),
            None => Ok(()),
        }
    }

    /// Parse `key` if present.
    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| Error::config(format!("bad value `{v}` for `{key}` in {}", self.source)))
            })
            .transpose()
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}
