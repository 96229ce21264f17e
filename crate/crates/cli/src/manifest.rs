//! Run manifests and per-run output directories.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const STATUS_FILE: &str = "status.json";
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_hash: String,
    pub code_version: String,
    pub seeds: BTreeMap<String, u64>,
    /// Seconds since the Unix epoch.
    pub started: u64,
    pub outputs: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub finished: u64,
    pub ok: bool,
    pub message: Option<String>,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn config_hash(cfg: &PipelineConfig) -> String {
    hex(&Sha256::digest(cfg.to_toml().as_bytes()))
}

/// Hash of everything that determines a run's outputs.
pub fn run_hash(command: &str, args: &[String], cfg: &PipelineConfig) -> String {
    let mut h = Sha256::new();
    for part in [command, &args.join("\u{1f}"), &cfg.to_toml(), CODE_VERSION] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    hex(&h.finalize())
}

pub fn default_run_dir(cfg: &PipelineConfig, command: &str, hash: &str) -> PathBuf {
    cfg.paths.runs.join(format!("{command}-{}", &hash[..12]))
}

pub fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    /// Writes the manifest into a fresh run directory. An existing manifest
    /// is never overwritten.
    pub fn create(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(MANIFEST_FILE);
        let mut f = std::fs::OpenOptions::new().write(true).create_new(true).open(&path)?;
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::io::Write::write_all(&mut f, text.as_bytes())
    }

    pub fn load(dir: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
        serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

impl RunStatus {
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::write(dir.join(STATUS_FILE), serde_json::to_string_pretty(self).expect("status serializes"))
    }
}
