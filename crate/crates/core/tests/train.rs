// SPDX-License-Identifier: MIT OR Apache-2.0

use kloc::model::checkpoint::parameters_to_bytes;
use kloc::model::{ModelConfig, Parameters};
use kloc::train::{
    check_recall_gate, evaluate_recall, probe_prompts, train, training_prompts, OptimizerKind,
    TrainConfig,
};
use kloc::world::{generate_world, Perspective, World, WorldConfig};
use kloc::Error;

fn small_world() -> World {
    generate_world(
        3,
        &WorldConfig {
            n_entities: 12,
            n_relations: 2,
            n_facts: 10,
            object_pool: 4,
        },
    )
    .unwrap()
}

fn small_model(world: &World, seed: u64) -> Parameters<f32> {
    let v = world.tokenizer().unwrap().vocab_size();
    Parameters::init(
        ModelConfig {
            n_layers: 2,
            d_model: 32,
            n_heads: 2,
            d_ff: 64,
            vocab_size: v,
            max_len: 16,
        },
        seed,
    )
    .unwrap()
}

#[test]
fn untrained_recall_is_near_chance() {
    let world = generate_world(0, &WorldConfig::default()).unwrap();
    let tok = world.tokenizer().unwrap();
    let params = Parameters::init(ModelConfig::toy(tok.vocab_size()), 0).unwrap();
    let prompts = training_prompts(&world, &tok).unwrap();
    let recall = evaluate_recall(&params, &prompts).unwrap();
    let chance = 1.0 / WorldConfig::default().object_pool as f64;
    assert!(
        recall.value() <= 2.0 * chance,
        "untrained recall {}",
        recall.value()
    );
}

#[test]
fn rigged_model_has_full_recall() {
    let world = small_world();
    let tok = world.tokenizer().unwrap();
    let mut params = small_model(&world, 1);
    let target = world.facts[0].o;
    let prompts: Vec<_> = probe_prompts(&world, &tok, Perspective::Entity, false)
        .unwrap()
        .into_iter()
        .filter(|p| p.answer == tok.entity(target))
        .collect();
    assert!(!prompts.is_empty());
    // constant final representation, unembedding boosted toward the answer
    params.lnf_gamma.data_mut().fill(0.0);
    params.lnf_beta.data_mut().fill(1.0);
    let v = params.config.vocab_size;
    for r in 0..params.config.d_model {
        params.unembed.data_mut()[r * v + tok.entity(target)] = 10.0;
    }
    let recall = evaluate_recall(&params, &prompts).unwrap();
    assert_eq!(recall.accuracy, Some(1.0));
}

#[test]
fn empty_prompt_list_has_undefined_accuracy() {
    let world = small_world();
    let recall = evaluate_recall(&small_model(&world, 1), &[]).unwrap();
    assert_eq!((recall.total, recall.accuracy), (0, None));
}

fn quick_config() -> TrainConfig {
    TrainConfig {
        epochs: 6,
        batch_size: 8,
        lr: 3e-3,
        seed: 11,
        eval_every: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_deterministic_and_lowers_loss() {
    let world = small_world();
    let (a, ra) = train(small_model(&world, 2), &world, &quick_config()).unwrap();
    let (b, rb) = train(small_model(&world, 2), &world, &quick_config()).unwrap();
    assert_eq!(
        parameters_to_bytes(&a).unwrap(),
        parameters_to_bytes(&b).unwrap()
    );
    assert_eq!(ra, rb);
    assert!(ra.loss_curve.last().unwrap() < ra.loss_curve.first().unwrap());
    let other = TrainConfig {
        seed: 12,
        ..quick_config()
    };
    let (c, _) = train(small_model(&world, 2), &world, &other).unwrap();
    assert_ne!(
        parameters_to_bytes(&a).unwrap(),
        parameters_to_bytes(&c).unwrap()
    );
}

#[test]
fn small_world_is_memorized() {
    let world = small_world();
    let config = TrainConfig {
        epochs: 200,
        batch_size: 8,
        lr: 3e-3,
        seed: 1,
        eval_every: 5,
        ..TrainConfig::default()
    };
    let (_, report) = train(small_model(&world, 3), &world, &config).unwrap();
    assert!(report.reached_target, "{report:?}");
    check_recall_gate(&report, 0.9).unwrap();
    assert!(report.entity.value() >= 0.95 && report.relation.value() >= 0.95);
}

#[test]
fn config_and_vocabulary_errors() {
    let world = small_world();
    let bad_lr = TrainConfig {
        lr: 0.0,
        ..quick_config()
    };
    assert!(matches!(
        train(small_model(&world, 1), &world, &bad_lr),
        Err(Error::Config(_))
    ));
    let bad_target = TrainConfig {
        recall_target: 1.5,
        ..quick_config()
    };
    assert!(train(small_model(&world, 1), &world, &bad_target).is_err());
    let mut wrong_vocab = small_model(&world, 1).config;
    wrong_vocab.vocab_size += 1;
    let p = Parameters::init(wrong_vocab, 1).unwrap();
    assert!(matches!(
        train(p, &world, &quick_config()),
        Err(Error::Config(_))
    ));
}

#[test]
fn divergence_returns_last_good_parameters() {
    let world = small_world();
    let config = TrainConfig {
        lr: 1e30,
        optimizer: OptimizerKind::Sgd,
        ..quick_config()
    };
    match train(small_model(&world, 4), &world, &config) {
        Err(Error::Divergence { step, last_good }) => {
            assert!(step >= 1);
            last_good.validate().unwrap();
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn gate_refuses_weak_models() {
    let world = small_world();
    let config = TrainConfig {
        epochs: 1,
        ..quick_config()
    };
    let (_, report) = train(small_model(&world, 5), &world, &config).unwrap();
    assert!(matches!(
        check_recall_gate(&report, 0.9),
        Err(Error::RecallGate(_))
    ));
}
