use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binio::{read_file, write_atomic};
use crate::error::Result;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Provenance of one run directory: what ran, with which resolved
/// configuration, over which input bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    /// SHA-256 of every input file, keyed by the path as given.
    pub inputs: BTreeMap<String, String>,
    pub tool_version: String,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

pub(crate) fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

pub(crate) fn hash_inputs<'a>(paths: impl IntoIterator<Item = &'a Path>) -> Result<BTreeMap<String, String>> {
    paths
        .into_iter()
        .map(|p| Ok((p.display().to_string(), hex::encode(Sha256::digest(read_file(p)?)))))
        .collect()
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, inputs: BTreeMap<String, String>, started_unix_ms: u128) -> Self {
        RunManifest {
            command: command.to_string(),
            config,
            inputs,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix_ms,
            finished_unix_ms: now_ms(),
        }
    }

    pub fn write(&self, run_dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(&run_dir.join(MANIFEST_FILE), text.as_bytes())
    }
}
