//! Run manifests: what went in, under which spec and seeds.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputFile {
    /// File name only; the full path is kept in `path`.
    pub name: String,
    pub path: String,
    pub sha256: String,
}

impl InputFile {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Ok(Self {
            name: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub toolkit_version: String,
    /// Seconds since the Unix epoch; `SOURCE_DATE_EPOCH` overrides the clock.
    pub timestamp: u64,
    pub inputs: Vec<InputFile>,
    /// Serialized run spec, when the command takes one.
    pub spec: Option<String>,
    pub seeds: BTreeMap<String, u64>,
    pub options: BTreeMap<String, String>,
    /// Hash of everything above except paths and timestamp.
    pub hash: String,
}

fn now() -> u64 {
    if let Some(t) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|s| s.parse().ok()) {
        return t;
    }
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    pub fn new(
        command: &str,
        inputs: Vec<InputFile>,
        spec: Option<String>,
        seeds: BTreeMap<String, u64>,
        options: BTreeMap<String, String>,
    ) -> Self {
        let mut m = Self {
            command: command.into(),
            toolkit_version: TOOLKIT_VERSION.into(),
            timestamp: now(),
            inputs,
            spec,
            seeds,
            options,
            hash: String::new(),
        };
        m.hash = m.content_hash();
        m
    }

    fn content_hash(&self) -> String {
        let inputs: Vec<(&str, &str)> = self.inputs.iter().map(|f| (f.name.as_str(), f.sha256.as_str())).collect();
        let canonical = serde_json::json!({
            "command": self.command,
            "toolkit_version": self.toolkit_version,
            "inputs": inputs,
            "spec": self.spec,
            "seeds": self.seeds,
            "options": self.options,
        });
        sha256_hex(canonical.to_string().as_bytes())
    }

    /// Short form embedded in every emitted table.
    pub fn short_hash(&self) -> &str {
        &self.hash[..16]
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}
