use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};
use crate::keys::Settings;

pub const MANIFEST_FILE: &str = "manifest.json";
/// Resolved keys in `key=value` form, accepted back by `--config`.
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
}

/// Written to the run directory before any computation starts. Holds no
/// timestamps, so reruns of the same invocation produce the same manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub reference: bool,
    pub inputs: Vec<InputFile>,
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).map_err(|_| CliError::MissingFile(path.to_path_buf()))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(format!("{:x}", h.finalize()))
}

impl RunManifest {
    pub fn new(command: &str, settings: &Settings, inputs: &[PathBuf], artifacts: &[&str]) -> Result<Self> {
        let inputs = inputs
            .iter()
            .map(|p| {
                Ok(InputFile {
                    path: p.display().to_string(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            tool: "swaplm".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config: settings.values().clone(),
            seed: settings.req("seed")?,
            reference: settings.req("reference")?,
            inputs,
            artifacts: artifacts.iter().map(|s| s.to_string()).collect(),
        })
    }
}

/// Create `<out>/<UTC timestamp>-seed<seed>`, adding a numeric suffix if a
/// run with the same second and seed already exists.
pub fn create_run_dir(out: &Path, seed: u64) -> Result<PathBuf> {
    fs::create_dir_all(out)?;
    let stem = format!("{}-seed{seed}", chrono::Utc::now().format("%Y%m%dT%H%M%SZ"));
    for k in 0.. {
        let name = if k == 0 { stem.clone() } else { format!("{stem}-{k}") };
        let dir = out.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!("unbounded suffix search")
}
