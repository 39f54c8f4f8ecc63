use std::path::Path;

use anyhow::{Context as _, Result};
use serde::{Deserialize, Serialize};

use ipred::baselines::{DEFAULT_DROPOUT, DEFAULT_MEMBERS};
use ipred::cvae::ModelConfig;
use ipred::synthdata::{DatasetConfig, RoundaboutSpec};
use ipred::training::TrainConfig;

/// Everything `--config` can override. Missing keys keep their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DatasetConfig,
    pub roundabout: RoundaboutSpec,
    pub ensemble_members: usize,
    pub dropout: f64,
    /// Feed the intention one-hot to the MLP ensemble and MC dropout.
    pub baseline_intention: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DatasetConfig::default(),
            roundabout: RoundaboutSpec::default(),
            ensemble_members: DEFAULT_MEMBERS,
            dropout: DEFAULT_DROPOUT,
            baseline_intention: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(RunConfig::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}
