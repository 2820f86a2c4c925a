//! One JSON manifest per command run.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{runtime, CmdResult, Failure};

#[derive(Serialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    /// Unix seconds.
    pub started: f64,
    pub finished: f64,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

pub fn file_digest(path: &Path) -> Result<String, Failure> {
    let bytes = std::fs::read(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        Self {
            command: command.into(),
            config: serde_json::Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: now(),
            finished: 0.0,
        }
    }

    pub fn input(&mut self, path: &Path, sha256: String) {
        self.inputs.push(Artifact { path: path.display().to_string(), sha256 });
    }

    pub fn output(&mut self, path: &Path, sha256: String) {
        self.outputs.push(Artifact { path: path.display().to_string(), sha256 });
    }

    /// Writes `manifest.json` into `dir`.
    pub fn finish(mut self, dir: &Path) -> CmdResult {
        self.finished = now();
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self).map_err(|e| runtime(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| runtime(format!("{}: {e}", path.display())))?;
        println!("manifest {}", path.display());
        Ok(())
    }
}
