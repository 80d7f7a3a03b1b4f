//! Optional JSON run configuration. Every section is optional; command-line
//! flags override file values, which override built-in defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use riskplan_core::annotation::EndpointConfig;
use riskplan_core::embedding::{RemoteEncoderConfig, DEFAULT_TEXT_DIM};
use riskplan_core::evaluation::RfsParams;
use riskplan_core::model::ModelConfig;
use riskplan_core::training::TrainConfig;

use crate::error::{CliError, CliResult};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Documented default network (224×224 inputs, width 128).
    Default,
    /// Reduced network for fast runs (56×56 inputs, width 32).
    Bench,
}

impl Preset {
    pub fn model(self) -> ModelConfig {
        match self {
            Preset::Default => ModelConfig::default(),
            Preset::Bench => ModelConfig::bench(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub seed: u64,
    pub count: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { seed: 0, count: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedSection {
    /// Width of mock embeddings; remote width comes from `encoder.dim`.
    pub dim: usize,
}

impl Default for EmbedSection {
    fn default() -> Self {
        EmbedSection { dim: DEFAULT_TEXT_DIM }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub version: Option<u32>,
    pub data: DataSection,
    pub endpoint: EndpointConfig,
    pub encoder: RemoteEncoderConfig,
    pub embed: EmbedSection,
    /// Base network before `model` overrides; `default` when absent.
    pub preset: Option<Preset>,
    /// Full model config; takes precedence over `preset`.
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
    pub rfs: RfsParams,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> CliResult<FileConfig> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::missing(format!("config file {}: {e}", path.display())))?;
        let cfg: FileConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("config file {}: {e}", path.display())))?;
        if let Some(v) = cfg.version {
            if v != CONFIG_VERSION {
                return Err(CliError::config(format!(
                    "config file {}: version {v}, expected {CONFIG_VERSION}",
                    path.display()
                )));
            }
        }
        Ok(cfg)
    }

    /// Model config: flag preset, else file model, else file preset, else default.
    pub fn model_config(&self, preset_flag: Option<Preset>) -> ModelConfig {
        match (preset_flag, &self.model) {
            (Some(p), _) => p.model(),
            (None, Some(m)) => m.clone(),
            (None, None) => self.preset.unwrap_or(Preset::Default).model(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_all_defaults() {
        let c: FileConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, FileConfig::default());
        assert_eq!(c.model_config(None), ModelConfig::default());
    }

    #[test]
    fn precedence_flag_over_file_over_default() {
        let c: FileConfig = serde_json::from_str(r#"{"model": {"d_model": 64}, "train": {"epochs": 7}}"#).unwrap();
        assert_eq!(c.model_config(None).d_model, 64);
        assert_eq!(c.model_config(Some(Preset::Bench)), ModelConfig::bench());
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.train.batch_size, TrainConfig::default().batch_size);
        let p: FileConfig = serde_json::from_str(r#"{"preset": "bench"}"#).unwrap();
        assert_eq!(p.model_config(None), ModelConfig::bench());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<FileConfig>(r#"{"trian": {}}"#).is_err());
        assert!(serde_json::from_str::<FileConfig>(r#"{"train": {"epoch": 3}}"#).is_err());
    }
}
