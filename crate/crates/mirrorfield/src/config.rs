//! One TOML document configures a whole run, one section per stage. Unknown
//! keys are rejected, partial files fill in from defaults, and serializing
//! writes every field out so saved configs are self-contained.

use std::fs;
use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use crate::metrics::Split;
use crate::model::ModelConfig;
use crate::renderer::RenderConfig;
use crate::synthdata::DatasetConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// View id every scene is conditioned on; must belong to the train split.
    pub reference_view: usize,
    pub split: Split,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { reference_view: 0, split: Split::Test, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub data: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub render: RenderConfig,
    pub eval: EvalConfig,
}

impl AppConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// JSON mirror of the effective config, embedded in checkpoints and
    /// reports for provenance.
    pub fn echo_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

pub fn load_config(path: &Path) -> anyhow::Result<AppConfig> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}
