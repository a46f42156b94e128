use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const MANIFEST_SCHEMA: &str = "fedshield.manifest/1";

/// Everything needed to reproduce a run. Passing the manifest back as
/// `--config` replays the same configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub tool_version: String,
    pub command: String,
    /// Fully resolved configuration, every key present.
    pub config: BTreeMap<String, String>,
    pub artifacts: Artifacts,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

/// Paths relative to the manifest's directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub probe: Option<String>,
    pub round_log: Option<String>,
    pub summary: Option<String>,
    pub adapter: Option<String>,
    pub table: Option<String>,
}

pub fn unix_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn new(command: &str, config: BTreeMap<String, String>, started_unix_ms: u128) -> Self {
        Self {
            schema: MANIFEST_SCHEMA.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config,
            artifacts: Artifacts::default(),
            started_unix_ms,
            finished_unix_ms: started_unix_ms,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest is plain data");
        std::fs::write(path, text + "\n").map_err(CliError::io(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        serde_json::from_str(&text).map_err(CliError::json(path))
    }
}
