use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::data::StandardizationRecord;
use crate::error::{Error, Result};
use crate::graph::Model;

pub const FORMAT: &str = "pogpn-checkpoint";
pub const VERSION: u32 = 1;

/// Trained model with the config it came from and the standardization
/// applied to its data. Stored as JSON; floats round-trip exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ExperimentConfig,
    pub standardization: Vec<StandardizationRecord>,
    pub model: Model,
}

impl Checkpoint {
    pub fn new(config: ExperimentConfig, standardization: Vec<StandardizationRecord>, model: Model) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            config,
            standardization,
            model,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("not a JSON document: {e}")))?;
        let format = v.get("format").and_then(|f| f.as_str());
        if format != Some(FORMAT) {
            return Err(Error::Checkpoint(format!("format {format:?}, expected {FORMAT:?}")));
        }
        let version = v.get("version").and_then(|f| f.as_u64());
        if version != Some(VERSION as u64) {
            return Err(Error::Checkpoint(format!("version {version:?}, expected {VERSION}")));
        }
        let ck: Self = serde_json::from_value(v).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.model.spec != ck.config.graph {
            return Err(Error::Checkpoint("model graph differs from the stored config".into()));
        }
        let order = ck.model.spec.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        if order != ck.model.order || ck.model.nodes.len() != ck.model.spec.nodes.len() {
            return Err(Error::Checkpoint("node table does not match the graph".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn record(&self, column: &str) -> Option<&StandardizationRecord> {
        self.standardization.iter().find(|r| r.column == column)
    }
}

/// Writes through a temporary file in the same directory and renames it
/// into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp"));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
