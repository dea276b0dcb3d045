//! Run configuration: TOML on disk, canonical JSON for hashing.

use std::path::{Path, PathBuf};

use dedetr_core::connectivity::ConnectivityConfig;
use dedetr_core::deprompt::DePromptConfig;
use dedetr_core::loss::LossConfig;
use dedetr_core::model::{ConfigError, ModelConfig};
use dedetr_core::protocol::{DataConfig, EpisodeConfig, ExperimentConfig};
use dedetr_core::synth::WorldConfig;
use dedetr_core::train::{OptimizerConfig, PhaseConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Everything needed to reproduce a run. `output` only says where
/// artifacts go and is left out of the config hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub model: ModelConfig,
    pub deprompt: DePromptConfig,
    pub connectivity: ConnectivityConfig,
    pub loss: LossConfig,
    pub world: WorldConfig,
    pub data: DataConfig,
    pub episode: EpisodeConfig,
    pub optimizer: OptimizerConfig,
    pub pretrain: PhaseConfig,
    pub finetune: PhaseConfig,
    pub iou_threshold: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrain_seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_experiment(&ExperimentConfig::default(), 0)
    }
}

impl RunConfig {
    pub fn from_experiment(e: &ExperimentConfig, seed: u64) -> Self {
        RunConfig {
            seed,
            output: None,
            model: e.model,
            deprompt: e.deprompt,
            connectivity: e.connectivity,
            loss: e.loss,
            world: e.world,
            data: e.data,
            episode: e.episode.clone(),
            optimizer: e.optimizer,
            pretrain: e.pretrain,
            finetune: e.finetune,
            iou_threshold: e.iou_threshold,
            pretrain_seed: e.pretrain_seed,
        }
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            model: self.model,
            deprompt: self.deprompt,
            connectivity: self.connectivity,
            loss: self.loss,
            world: self.world,
            data: self.data,
            episode: self.episode.clone(),
            optimizer: self.optimizer,
            pretrain: self.pretrain,
            finetune: self.finetune,
            iou_threshold: self.iou_threshold,
            pretrain_seed: self.pretrain_seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        RunConfig { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.experiment().validate()
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always representable as TOML")
    }

    /// JSON with sorted keys and no whitespace, `output` omitted.
    pub fn canonical_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("run config serializes");
        if let Some(map) = v.as_object_mut() {
            map.remove("output");
        }
        // serde_json's map is ordered by key, so this is canonical.
        serde_json::to_string(&v).expect("json value serializes")
    }

    /// SHA-256 of the canonical JSON, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    pub fn short_hash(&self) -> String {
        self.hash()[..12].to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let c = RunConfig::default();
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(c, back);
        assert_eq!(c.hash(), back.hash());
    }

    #[test]
    fn hash_ignores_output_but_not_seed() {
        let a = RunConfig::default();
        let b = RunConfig { output: Some("elsewhere".into()), ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), a.with_seed(1).hash());
    }

    #[test]
    fn partial_file_uses_defaults() {
        let c = RunConfig::from_toml("seed = 3\n[model]\nd_model = 32\nn_heads = 4\nn_enc_layers = 6\nn_dec_layers = 6\nn_queries = 16\nffn_dim = 64\nn_classes = 10\npatch_size = 8\nimage_size = 64\nchannels = 1\ndropout = 0.0\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.model.d_model, 32);
        assert_eq!(c.loss, LossConfig::default());
    }

    #[test]
    fn field_level_errors() {
        let err = RunConfig::from_toml("[deprompt]\nstrategy = \"sometimes\"\n").unwrap_err();
        assert!(err.to_string().contains("strategy"), "{err}");
        let mut c = RunConfig::default();
        c.model.d_model = 63;
        let err = RunConfig::from_toml(&c.to_toml()).unwrap_err();
        assert!(err.to_string().contains("model.d_model"), "{err}");
        let err = RunConfig::from_toml("bogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }
}
