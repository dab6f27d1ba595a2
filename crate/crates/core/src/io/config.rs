//! Run configuration: one strict JSON document covering training knobs, the
//! distribution channel, model selection, and data paths.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::manip::ChannelConfig;
use crate::raw::NipModel;
use crate::train::TrainConfig;
use crate::{Error, Result};

/// Everything a training or evaluation command needs. Unknown keys are
/// rejected so typos fail fast instead of silently using defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Distribution channel between manipulation and classification;
    /// `null`/absent disables it (acquisition-only experiments).
    pub channel: Option<ChannelConfig>,
    /// Development model architecture (and width for the u-shaped model).
    pub model: NipModel,
    /// Classifier width multiplier.
    pub fan_width: f64,
    /// Path to a dataset container; commands may override it.
    pub data: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            channel: None,
            model: NipModel::INet,
            fan_width: 0.25,
            data: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let Some(c) = &self.channel {
            c.validate()?;
        }
        if !(self.fan_width > 0.0) {
            return Err(Error::Config("fan_width must be positive".into()));
        }
        Ok(())
    }
}

/// Parse a config document; serde's message names any unknown key.
pub fn parse_run_config(json: &str) -> Result<RunConfig> {
    let cfg: RunConfig =
        serde_json::from_str(json).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_run_config(&text)
}
