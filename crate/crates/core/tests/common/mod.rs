#![allow(dead_code)]

use compt_core::tasks::generate_task_family;
use compt_core::{
    BackboneParams, CompositionMethod, FamilySpec, GroupSpec, ModelConfig, RuleBase, TaskData, TrainConfig, World,
};

pub fn world() -> World {
    World::new(16, 4, 6, 4, 3).unwrap().with_margin(0.3)
}

pub fn backbone() -> BackboneParams {
    let config = ModelConfig {
        vocab: 16,
        d: 8,
        layers: 1,
        heads: 2,
        seq_len: 6,
        max_prompt_len: 16,
        mlp_hidden: 16,
    };
    BackboneParams::init(&config, 11).unwrap().freeze()
}

pub fn family() -> FamilySpec {
    FamilySpec {
        name: "small".into(),
        groups: vec![
            GroupSpec::new("a", 2, RuleBase::Random, 0.1),
            GroupSpec::new("b", 2, RuleBase::Negate("a".into()), 0.1).with_labels([2, 3]),
        ],
        train_pool: 16,
        dev_size: 8,
        test_size: 12,
    }
}

pub fn tasks() -> Vec<TaskData> {
    generate_task_family(&world(), &family(), 5).unwrap()
}

pub fn config(method: CompositionMethod) -> TrainConfig {
    TrainConfig {
        method,
        num_sources: 2,
        source_len: 3,
        k_shot: 4,
        epochs: 2,
        batch_size: 2,
        ..TrainConfig::default()
    }
}
