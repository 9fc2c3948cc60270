//! Run manifests: every command writes one next to its outputs, recording
//! the command, its configuration, the seed, content fingerprints of the
//! inputs, the tool version, and the wall-clock duration.

use super::CliError;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use std::time::Instant;

#[derive(Debug, Serialize, Deserialize)]
pub struct InputFingerprint {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<InputFingerprint>,
    pub tool_version: String,
    pub duration_seconds: f64,
}

pub struct ManifestBuilder {
    command: String,
    config: serde_json::Value,
    seed: u64,
    inputs: Vec<InputFingerprint>,
    started: Instant,
}

impl ManifestBuilder {
    pub fn start(command: &str, config: serde_json::Value, seed: u64) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            config,
            seed,
            inputs: Vec::new(),
            started: Instant::now(),
        }
    }

    /// Fingerprint a file's bytes.
    pub fn input_file(&mut self, path: &Path) -> Result<(), CliError> {
        let bytes = std::fs::read(path).map_err(CliError::io(path.display().to_string()))?;
        self.inputs.push(InputFingerprint {
            name: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    /// Fingerprint an in-memory payload (e.g. the parameter string of a
    /// synthetic run).
    pub fn input_bytes(&mut self, name: &str, bytes: &[u8]) {
        self.inputs.push(InputFingerprint {
            name: name.to_string(),
            sha256: sha256_hex(bytes),
        });
    }

    pub fn finish(self) -> RunManifest {
        RunManifest {
            command: self.command,
            config: self.config,
            seed: self.seed,
            inputs: self.inputs,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            duration_seconds: self.started.elapsed().as_secs_f64(),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
