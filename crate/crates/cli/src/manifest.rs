//! Run manifest: resolved config, input hashes, outputs, timings.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Serialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Serialize)]
pub struct Manifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<InputHash>,
    pub outputs: Vec<String>,
    pub phase_seconds: Vec<(String, f64)>,
    pub total_seconds: f64,
    pub version: String,
}

pub struct ManifestBuilder {
    manifest: Manifest,
    started: Instant,
    phase_started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, config: serde_json::Value, seed: u64) -> Self {
        ManifestBuilder {
            manifest: Manifest {
                command: command.to_string(),
                config,
                seed,
                inputs: Vec::new(),
                outputs: Vec::new(),
                phase_seconds: Vec::new(),
                total_seconds: 0.0,
                version: env!("CARGO_PKG_VERSION").to_string(),
            },
            started: Instant::now(),
            phase_started: Instant::now(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> anyhow::Result<()> {
        let bytes = std::fs::read(path)?;
        let digest = Sha256::digest(&bytes);
        self.manifest.inputs.push(InputHash {
            path: path.display().to_string(),
            sha256: format!("{digest:x}"),
        });
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) {
        self.manifest.outputs.push(path.display().to_string());
    }

    /// Records the time since the previous phase mark under `name`.
    pub fn mark_phase(&mut self, name: &str) {
        self.manifest
            .phase_seconds
            .push((name.to_string(), self.phase_started.elapsed().as_secs_f64()));
        self.phase_started = Instant::now();
    }

    /// Verifies every listed output exists, then writes the manifest.
    pub fn write(mut self, path: &PathBuf) -> anyhow::Result<()> {
        for out in &self.manifest.outputs {
            if !Path::new(out).exists() {
                anyhow::bail!("declared output '{out}' does not exist");
            }
        }
        self.manifest.total_seconds = self.started.elapsed().as_secs_f64();
        std::fs::write(path, serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(())
    }
}
