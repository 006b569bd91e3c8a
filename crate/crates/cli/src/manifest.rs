//! `manifest.json`: what ran, with which configuration, and what it wrote.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub seed: Option<u64>,
    pub config: Value,
    /// Output files relative to the output directory, with their SHA-256.
    pub artifacts: BTreeMap<String, String>,
    pub versions: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::runtime("manifest", format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Manifest {
    pub fn new(command: &str, seed: Option<u64>, config: Value) -> Self {
        let versions = BTreeMap::from([
            ("fnet".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ("manifest_format".to_string(), "1".to_string()),
        ]);
        Self {
            command: command.to_string(),
            seed,
            config,
            artifacts: BTreeMap::new(),
            versions,
        }
    }

    /// Hashes `files` and writes the manifest into `out_dir`.
    pub fn write(mut self, out_dir: &Path, files: &[PathBuf]) -> Result<PathBuf, CliError> {
        for f in files {
            let key = f
                .strip_prefix(out_dir)
                .unwrap_or(f)
                .to_string_lossy()
                .replace('\\', "/");
            self.artifacts.insert(key, sha256_file(f)?);
        }
        let path = out_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self).map_err(|e| CliError::runtime("manifest", e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| CliError::runtime("manifest", format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}
