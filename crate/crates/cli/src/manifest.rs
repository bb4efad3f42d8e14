//! Run manifest, stage caching and the output-directory lock.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use sepsis_mbrl::model_io::sha256_hex;

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMINGS_FILE: &str = "timings.json";
pub const LOCK_FILE: &str = ".lock";

/// Inputs and outputs of one stage, as file name to SHA-256.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRecord {
    pub config_hash: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn load_or_new(dir: &Path, config_hash: &str) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self {
                tool_version: env!("CARGO_PKG_VERSION").into(),
                config_hash: config_hash.into(),
                stages: BTreeMap::new(),
            });
        }
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let mut m: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("{} is not a valid manifest: {e}", path.display())))?;
        m.tool_version = env!("CARGO_PKG_VERSION").into();
        m.config_hash = config_hash.into();
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }

    /// The stage whose recorded outputs include `file`.
    pub fn producer(&self, file: &str) -> Option<(&str, &StageRecord)> {
        self.stages
            .iter()
            .find(|(_, r)| r.outputs.contains_key(file))
            .map(|(n, r)| (n.as_str(), r))
    }
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// Hashes of the named files inside `dir`.
pub fn hash_files(dir: &Path, names: &[String]) -> Result<BTreeMap<String, String>> {
    names.iter().map(|n| Ok((n.clone(), hash_file(&dir.join(n))?))).collect()
}

/// True when `record` was produced with `config_hash` from the current
/// inputs and every recorded output is still on disk unchanged.
pub fn up_to_date(dir: &Path, record: &StageRecord, config_hash: &str, inputs: &BTreeMap<String, String>) -> bool {
    record.config_hash == config_hash
        && &record.inputs == inputs
        && record
            .outputs
            .iter()
            .all(|(name, hash)| hash_file(&dir.join(name)).is_ok_and(|h| &h == hash))
}

/// Wall-clock seconds per stage, kept out of the manifest so manifests stay
/// reproducible.
pub fn record_timing(dir: &Path, stage: &str, seconds: f64) -> Result<()> {
    let path = dir.join(TIMINGS_FILE);
    let mut timings: BTreeMap<String, f64> = fs::read_to_string(&path)
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .unwrap_or_default();
    timings.insert(stage.into(), seconds);
    fs::write(&path, serde_json::to_string_pretty(&timings)? + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(CliError::Locked(format!("{} exists; remove it if no other run is active", path.display())).into())
            }
            Err(e) => Err(e).with_context(|| format!("creating {}", path.display())),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
