//! Run manifests: every command that writes artifacts appends one JSON
//! record to `manifest.jsonl` in its output directory, capturing the
//! resolved configuration, input hashes, and produced files.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub input_hashes: BTreeMap<String, String>,
    pub artifacts: Vec<String>,
    pub tool_version: String,
    pub wall_seconds: f64,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            config: BTreeMap::new(),
            seed,
            input_hashes: BTreeMap::new(),
            artifacts: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_seconds: 0.0,
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.config.insert(key.to_string(), value.to_string());
    }

    pub fn hash_input(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        self.input_hashes
            .insert(path.display().to_string(), format!("{:x}", hasher.finalize()));
        Ok(())
    }

    pub fn add_artifact(&mut self, path: &Path) {
        self.artifacts.push(path.display().to_string());
    }

    /// Append this record to `dir/manifest.jsonl` (append-only).
    pub fn append_to(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        let line = serde_json::to_string(self)
            .map_err(|e| Error::Config(format!("manifest serialization failed: {e}")))?;
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_only_accumulates_lines() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::new("train", 7);
        m.set("steps", 10);
        m.append_to(dir.path()).unwrap();
        m.append_to(dir.path()).unwrap();
        let content = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(content.lines().count(), 2);
        assert!(content.contains("\"command\":\"train\""));
    }
}
