// SPDX-License-Identifier: MIT OR Apache-2.0

#![allow(dead_code)]

use kloc::model::{ModelConfig, Parameters};
use kloc::train::{train, TrainConfig};
use kloc::world::{generate_world, World, WorldConfig};

pub fn small_world() -> World {
    generate_world(
        5,
        &WorldConfig {
            n_entities: 16,
            n_relations: 3,
            n_facts: 24,
            object_pool: 5,
        },
    )
    .unwrap()
}

/// A 3-layer model trained on [`small_world`] until it recalls the facts.
pub fn trained_small() -> (World, Parameters<f32>) {
    let world = small_world();
    let v = world.tokenizer().unwrap().vocab_size();
    let params = Parameters::init(
        ModelConfig {
            n_layers: 3,
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            vocab_size: v,
            max_len: 16,
        },
        9,
    )
    .unwrap();
    let config = TrainConfig {
        epochs: 300,
        batch_size: 16,
        lr: 3e-3,
        seed: 2,
        recall_target: 1.0,
        ..TrainConfig::default()
    };
    let (params, report) = train(params, &world, &config).unwrap();
    assert!(report.min_train_recall() >= 0.9, "{report:?}");
    (world, params)
}
