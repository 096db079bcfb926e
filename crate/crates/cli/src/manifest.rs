use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use luna_core::eval::write_file;
use luna_core::Result;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Provenance record written into every run directory.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    /// sha256 of the effective configuration JSON.
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub outputs: Vec<PathBuf>,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl RunManifest {
    pub fn start(command: &str, config_json: &str, seed: u64) -> Self {
        RunManifest {
            command: command.into(),
            args: std::env::args().skip(1).collect(),
            config_hash: sha256_hex(config_json.as_bytes()),
            seed,
            version: env!("CARGO_PKG_VERSION").into(),
            started_unix: now(),
            finished_unix: 0,
            outputs: Vec::new(),
        }
    }

    pub fn finish(mut self, dir: &Path, outputs: Vec<PathBuf>) -> Result<()> {
        self.finished_unix = now();
        self.outputs = outputs;
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        write_file(&dir.join(MANIFEST_FILE), &text)
    }
}
