//! Run configuration: one strict JSON document wiring a dataset, a
//! model, a dequantizer, and training settings to an output directory.
//!
//! Parsing rejects unknown keys everywhere, and saving materializes
//! every default, so the copy written into a run directory is the
//! complete recipe for reproducing that run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use flowkit_core::dataio::DatasetSpec;
use flowkit_core::model::{DequantSpec, ModelSpec};
use flowkit_core::training::TrainConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub dequantizer: DequantSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("flowkit-run")
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty config is valid")
    }
}

impl RunConfig {
    /// Read and validate a config file. The error string names the
    /// file and the offending key or value.
    pub fn load(path: &Path) -> Result<RunConfig, String> {
        let text = fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| format!("invalid config {}: {e}", path.display()))?;
        flowkit_core::model::validate(&cfg.model)
            .map_err(|e| format!("invalid config {}: model: {e}", path.display()))?;
        cfg.train
            .validate()
            .map_err(|e| format!("invalid config {}: train: {e}", path.display()))?;
        Ok(cfg)
    }

    /// Write the fully materialized form, one key per line.
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("config serializes");
        text.push('\n');
        fs::write(path, text)
    }
}
