use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use ttrack_core::model::ModelConfig;
use ttrack_core::synthetic::SquareConfig;
use ttrack_core::tracker::TrackerConfig;
use ttrack_core::training::TrainConfig;

/// Contents of the `--config` TOML file; every section is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub model: ModelConfig,
    pub tracker: TrackerConfig,
    pub train: TrainConfig,
    /// Generator settings for `synth` and synthetic training data.
    pub synth: SquareConfig,
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self =
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.model.validate()?;
        cfg.tracker.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}
