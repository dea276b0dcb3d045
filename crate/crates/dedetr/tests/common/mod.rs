#![allow(dead_code)]

use dedetr::RunConfig;
use dedetr_core::model::ModelConfig;
use dedetr_core::synth::WorldConfig;
use dedetr_core::train::PhaseConfig;

/// A configuration that pretrains, fine-tunes and evaluates in well under a
/// second.
pub fn tiny_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.model = ModelConfig { d_model: 8, n_heads: 2, n_queries: 4, ffn_dim: 16, patch_size: 8, image_size: 16, ..c.model };
    c.world = WorldConfig { canvas: 16, min_size: 5, max_size: 8, min_objects: 1, max_objects: 2, ..c.world };
    c.data.n_train = 200;
    c.data.n_test = 12;
    c.pretrain = PhaseConfig { epochs: 1, lr: 1e-3, batch_size: 8, patience: 0, min_delta: 0.0 };
    c.finetune = PhaseConfig { epochs: 1, lr: 5e-4, batch_size: 4, patience: 0, min_delta: 0.0 };
    c.episode.n_shot = 1;
    c.episode.base_multiplier = 3;
    c
}
