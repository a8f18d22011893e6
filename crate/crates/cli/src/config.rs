//! Experiment configuration files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use gare_core::probes::ProbeConfig;
use gare_core::synthdata::SyntheticDatasetSpec;
use gare_core::trainer::TrainConfig;

use crate::manifest::RunManifest;
use crate::CliError;

/// One experiment, fully specified: the dataset recipe, the optimization
/// recipe, and the probe settings. Unknown keys are rejected so a typo'd
/// hyperparameter name fails loudly instead of silently keeping a
/// default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub dataset: SyntheticDatasetSpec,
    pub train: TrainConfig,
    #[serde(default)]
    pub probes: ProbeConfig,
}

impl RunConfigFile {
    pub fn validate(&self) -> Result<(), CliError> {
        self.dataset.validate()?;
        self.train.validate()?;
        if self.probes.histogram_bins == 0 {
            return Err(CliError::config("histogram_bins must be at least 1"));
        }
        Ok(())
    }
}

/// Reads a config document. A finished run's manifest is accepted in
/// place of a config: its `config` object is exactly the configuration
/// that produced the run, so replaying a manifest reproduces the run.
pub fn load_config(path: &Path) -> Result<RunConfigFile, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::config(format!("config {} is not valid JSON: {e}", path.display())))?;
    let config = if value.get("config").is_some() {
        serde_json::from_value::<RunManifest>(value)
            .map_err(|e| CliError::config(format!("manifest {}: {e}", path.display())))?
            .config
    } else {
        serde_json::from_value::<RunConfigFile>(value)
            .map_err(|e| CliError::config(format!("config {}: {e}", path.display())))?
    };
    config.validate()?;
    Ok(config)
}
