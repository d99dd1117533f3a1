//! One `run.json` per invocation.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const RUN_MANIFEST: &str = "run.json";

#[derive(Debug, Clone, Serialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub seed: Option<u64>,
    /// SHA-256 over command, arguments, resolved config and seed.
    pub input_hash: String,
    pub output_dir: PathBuf,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub artifacts: Vec<Artifact>,
}

pub fn now_unix() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// Hash of everything that determines a run's outputs.
pub fn input_hash(command: &str, args: &serde_json::Value, config_toml: &str, seed: Option<u64>) -> String {
    let mut h = Sha256::new();
    for part in [command.as_bytes(), args.to_string().as_bytes(), config_toml.as_bytes()] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part);
    }
    h.update(seed.map_or([0xff; 8], u64::to_le_bytes));
    hex(&h.finalize())
}

/// Hashes the listed files (relative to `dir`) and writes `dir/run.json`.
pub fn finish(mut m: RunManifest, dir: &Path, files: &[PathBuf]) -> Result<PathBuf> {
    for f in files {
        let rel = f.strip_prefix(dir).unwrap_or(f);
        m.artifacts.push(Artifact { path: rel.display().to_string(), sha256: sha256_file(f)? });
    }
    m.finished_unix = now_unix();
    let path = dir.join(RUN_MANIFEST);
    let mut text = serde_json::to_string_pretty(&m)?;
    text.push('\n');
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}
