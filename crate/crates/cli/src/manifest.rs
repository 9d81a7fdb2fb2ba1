//! One `run_manifest.json` per run: command, resolved configuration, seed,
//! tool version, digests of every input file, and wall-clock bounds. The
//! primary outputs of a run are a pure function of everything here except
//! the timestamps.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use chrono::{SecondsFormat, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{CliError, Result};

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    /// Input path -> SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub started: String,
    pub finished: String,
}

/// Collects manifest fields over the course of a run.
pub struct RunRecorder {
    command: &'static str,
    seed: u64,
    config: serde_json::Value,
    inputs: BTreeMap<String, String>,
    started: String,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunRecorder {
    pub fn new(command: &'static str, seed: u64, config: serde_json::Value) -> Self {
        RunRecorder {
            command,
            seed,
            config,
            inputs: BTreeMap::new(),
            started: now(),
        }
    }

    /// Replace the recorded config; for settings finalized mid-run.
    pub fn set_config(&mut self, config: serde_json::Value) {
        self.config = config;
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let digest = sha256_file(path)?;
        self.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    /// Write `run_manifest.json` under `out`. Exactly one call per run.
    pub fn finish(self, out: &Path) -> Result<()> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.seed,
            config: self.config,
            inputs: self.inputs,
            started: self.started,
            finished: now(),
        };
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| CliError::Input(format!("manifest serialization: {e}")))?;
        let path = out.join("run_manifest.json");
        std::fs::write(&path, text + "\n")
            .map_err(|e| CliError::Input(format!("writing {}: {e}", path.display())))?;
        Ok(())
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = std::fs::File::open(path)
        .map_err(|e| CliError::Input(format!("digesting {}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file
            .read(&mut buf)
            .map_err(|e| CliError::Input(format!("digesting {}: {e}", path.display())))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

/// Create the output directory if needed and fail early when it is a file.
pub fn prepare_out_dir(out: &Path) -> Result<()> {
    if out.exists() && !out.is_dir() {
        return Err(CliError::Input(format!(
            "--out {} exists and is not a directory",
            out.display()
        )));
    }
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::Input(format!("creating {}: {e}", out.display())))?;
    Ok(())
}
