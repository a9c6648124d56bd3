//! Declarative run configuration: a TOML file with `[train]`, `[model]`
//! and `[synth]` sections, each optional and partial. Command-line
//! flags override file values; the resolved configuration is echoed
//! into every run manifest.

use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use unveil::model::{NetConfig, TaskMode};
use unveil::synth::SynthSpec;
use unveil::train::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub mode: TaskMode,
    #[serde(flatten)]
    pub net: NetConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: TaskMode::Reflection,
            net: NetConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FileConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub synth: SynthSpec,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config file {}", p.display()))?;
                toml::from_str(&text)
                    .with_context(|| format!("parsing config file {}", p.display()))
            }
        }
    }
}

