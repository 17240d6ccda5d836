//! The standard experimental setup: world, task family, backbone shape and
//! pretraining schedule shared by the command line defaults and the
//! acceptance suite.

use compt_core::pretrain::PretrainConfig;
use compt_core::{FamilySpec, ModelConfig, OptimizerKind, TrainConfig};

use crate::data::WorldConfig;

pub const WORLD_SEED: u64 = 1;
pub const FAMILY_SEED: u64 = 1;
pub const LATENT_DIM: usize = 8;
pub const NUM_LABELS: usize = 4;
pub const MARGIN: f64 = 0.5;
pub const SPREAD: f64 = 0.2;
pub const WIDTH: usize = 32;

pub fn world() -> WorldConfig {
    WorldConfig {
        vocab: 64,
        num_labels: NUM_LABELS,
        seq_len: 16,
        latent_dim: LATENT_DIM,
        margin: MARGIN,
        seed: WORLD_SEED,
    }
}

pub fn family(spread: f64) -> FamilySpec {
    FamilySpec::two_conflicting_triples(spread)
}

/// Backbone shape for a world: width 32, two layers, four heads.
pub fn model_config(world: &WorldConfig) -> ModelConfig {
    ModelConfig {
        vocab: world.vocab,
        d: WIDTH,
        mlp_hidden: 2 * WIDTH,
        seq_len: world.seq_len,
        ..ModelConfig::default()
    }
}

pub fn pretrain_config() -> PretrainConfig {
    PretrainConfig {
        steps: 3000,
        rules_per_step: 8,
        examples_per_rule: 4,
        prompt_len: (8, 24),
        prompt_noise: 0.1,
        ..PretrainConfig::default()
    }
}

/// Prompt-training settings used by the few-shot experiments.
pub fn few_shot_config() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        optimizer: OptimizerKind::adam(),
        ..TrainConfig::default()
    }
}
