//! Experiment manifests: what ran, with which config and seeds, and the
//! content hash of everything it read and wrote.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::sha256_hex;
use crate::pipeline::{PipelineConfig, Stage};

pub const MANIFEST_SCHEMA: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// A file and its SHA-256, with the path relative to the run directory for
/// outputs and as given for inputs.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

impl Artifact {
    pub fn hash_file(path: &Path, label: String) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: label,
            sha256: sha256_hex(&bytes),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub outputs: Vec<Artifact>,
    pub elapsed_ms: u64,
    /// Peak bytes of retained activations, where the stage tracks them.
    pub peak_activation_bytes: Option<usize>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    Failed { stage: Stage, error: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub schema_version: u32,
    pub crate_version: String,
    pub command: String,
    pub config: PipelineConfig,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<Artifact>,
    pub stages: Vec<StageRecord>,
    pub status: RunStatus,
}

impl ExperimentManifest {
    pub fn new(command: &str, config: PipelineConfig) -> Self {
        Self {
            schema_version: MANIFEST_SCHEMA,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            stages: Vec::new(),
            status: RunStatus::Completed,
        }
    }

    /// Every output of every stage, in stage order.
    pub fn outputs(&self) -> impl Iterator<Item = &Artifact> {
        self.stages.iter().flat_map(|s| s.outputs.iter())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        if m.schema_version != MANIFEST_SCHEMA {
            return Err(Error::Format(format!("manifest schema {} (expected {MANIFEST_SCHEMA})", m.schema_version)));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}
