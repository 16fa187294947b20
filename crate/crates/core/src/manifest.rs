//! One JSON record per command run: what ran, with which settings and
//! seeds, on which inputs (by SHA-256), producing which files.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<InputHash>,
    pub artifacts: Vec<String>,
    pub wall_time_secs: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Collects manifest fields while a command runs.
pub struct ManifestBuilder {
    started: Instant,
    manifest: RunManifest,
}

impl ManifestBuilder {
    pub fn new(command: &str) -> Self {
        Self {
            started: Instant::now(),
            manifest: RunManifest {
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                command: command.to_string(),
                config: BTreeMap::new(),
                seeds: BTreeMap::new(),
                inputs: Vec::new(),
                artifacts: Vec::new(),
                wall_time_secs: 0.0,
            },
        }
    }

    pub fn config(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.manifest.config.insert(key.to_string(), value.to_string());
        self
    }

    pub fn seed(&mut self, name: &str, seed: u64) -> &mut Self {
        self.manifest.seeds.insert(name.to_string(), seed);
        self
    }

    pub fn input(&mut self, path: &Path) -> std::io::Result<&mut Self> {
        let sha256 = sha256_file(path)?;
        self.manifest.inputs.push(InputHash {
            path: path.display().to_string(),
            sha256,
        });
        Ok(self)
    }

    pub fn artifact(&mut self, path: &Path) -> &mut Self {
        self.manifest.artifacts.push(path.display().to_string());
        self
    }

    pub fn finish(mut self) -> RunManifest {
        self.manifest.wall_time_secs = self.started.elapsed().as_secs_f64();
        self.manifest
    }
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn write(&self, path: &Path) -> Result<(), crate::fmat::FmatError> {
        crate::fmat::write_atomic(path, self.to_json().as_bytes())
    }
}
