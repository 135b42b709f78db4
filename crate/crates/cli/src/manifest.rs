//! Run manifests: resolved config, seed, and SHA-256 hashes of every
//! input and output artifact. Timestamps live only here, keeping the
//! artifacts themselves byte-reproducible.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::json;
use sha2::{Digest, Sha256};

use imb_core::error::Result;

pub struct Manifest {
    command: &'static str,
    config: serde_json::Value,
    seed: Option<u64>,
    inputs: Vec<(String, String)>,
    outputs: Vec<(String, String)>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

impl Manifest {
    pub fn new(command: &'static str, config: serde_json::Value, seed: Option<u64>) -> Self {
        Manifest {
            command,
            config,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(mut self, path: &Path) -> Result<Self> {
        self.inputs
            .push((path.display().to_string(), sha256_file(path)?));
        Ok(self)
    }

    pub fn output(mut self, path: &Path) -> Result<Self> {
        self.outputs
            .push((path.display().to_string(), sha256_file(path)?));
        Ok(self)
    }

    pub fn write(self, out_dir: &Path) -> Result<()> {
        let unix_seconds = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let to_map = |pairs: Vec<(String, String)>| {
            pairs
                .into_iter()
                .map(|(k, v)| (k, serde_json::Value::String(v)))
                .collect::<serde_json::Map<String, serde_json::Value>>()
        };
        let value = json!({
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "inputs": to_map(self.inputs),
            "outputs": to_map(self.outputs),
            "unix_time": unix_seconds,
        });
        let mut text = serde_json::to_string_pretty(&value).expect("manifest serializes");
        text.push('\n');
        std::fs::write(out_dir.join("manifest.json"), text)?;
        Ok(())
    }
}
