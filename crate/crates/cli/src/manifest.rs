use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use chrono::{SecondsFormat, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Provenance block embedded in every JSON output.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub params: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<InputDigest>,
    pub started_at: String,
    pub finished_at: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn start(command: &str, params: &impl Serialize) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            params: serde_json::to_value(params).expect("parameters serialize"),
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            started_at: now(),
            finished_at: None,
        }
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.seeds.insert(name.to_string(), value);
    }

    pub fn input(&mut self, path: &Path) -> std::io::Result<()> {
        let digest = Sha256::digest(fs::read(path)?);
        self.inputs.push(InputDigest {
            path: path.display().to_string(),
            sha256: hex::encode(digest),
        });
        Ok(())
    }

    pub fn finish(&mut self) {
        self.finished_at = Some(now());
    }
}
