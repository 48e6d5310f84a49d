// SPDX-License-Identifier: MIT OR Apache-2.0

//! Memorizing the world: answer-position cross-entropy over the training
//! templates of both perspectives.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::taped::ParamVars;
use crate::model::{argmax, last_logits, Parameters};
use crate::tensor::kernels::pack_segments;
use crate::tensor::{Adam, AdamConfig, Sgd, Tape, Tensor};
use crate::world::{Perspective, PromptInstance, Tokenizer, World};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Upper bound; training stops early once the recall target is met.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub recall_target: f64,
    /// Each training prompt gets a random prefix of up to this many tokens.
    pub max_prefix: usize,
    /// Recall is measured every this many epochs (and after the last).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 400,
            batch_size: 64,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            recall_target: 0.95,
            max_prefix: 3,
            eval_every: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        if !(0.0..=1.0).contains(&self.recall_target) {
            return Err(Error::Config(format!(
                "recall target {} outside [0, 1]",
                self.recall_target
            )));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "batch size and eval interval must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Top-1 accuracy over a prompt set; `accuracy` is `None` for an empty set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    pub total: usize,
    pub correct: usize,
    pub accuracy: Option<f64>,
}

impl Recall {
    pub fn value(&self) -> f64 {
        self.accuracy.unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    /// Facts × training templates, entity family.
    pub entity: Recall,
    /// Facts × training templates, relation family.
    pub relation: Recall,
    pub held_out_entity: Recall,
    pub held_out_relation: Recall,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    pub epochs_run: usize,
    pub recall_target: f64,
    pub reached_target: bool,
}

impl RecallReport {
    pub fn train_recall(&self, perspective: Perspective) -> f64 {
        match perspective {
            Perspective::Entity => self.entity.value(),
            Perspective::Relation => self.relation.value(),
        }
    }

    pub fn min_train_recall(&self) -> f64 {
        self.entity.value().min(self.relation.value())
    }
}

/// Verbalizes every fact through the selected templates of one family.
pub fn probe_prompts(
    world: &World,
    tokenizer: &Tokenizer,
    perspective: Perspective,
    held_out: bool,
) -> Result<Vec<PromptInstance>> {
    let sets = world.split_probe_sets()?;
    let mut out = Vec::new();
    for fact in &world.facts {
        let split = sets.get(fact.r, perspective);
        let ids = if held_out {
            &split.held_out
        } else {
            &split.train
        };
        for &t in ids {
            out.push(world.verbalize(tokenizer, fact, perspective, t)?);
        }
    }
    Ok(out)
}

/// Training prompts of both families.
pub fn training_prompts(world: &World, tokenizer: &Tokenizer) -> Result<Vec<PromptInstance>> {
    let mut out = probe_prompts(world, tokenizer, Perspective::Entity, false)?;
    out.extend(probe_prompts(
        world,
        tokenizer,
        Perspective::Relation,
        false,
    )?);
    Ok(out)
}

/// Per-prompt argmax predictions at the final position.
pub fn predictions(params: &Parameters<f32>, prompts: &[PromptInstance]) -> Result<Vec<usize>> {
    let seqs: Vec<Vec<usize>> = prompts.iter().map(|p| p.tokens.clone()).collect();
    let logits = last_logits(params, &seqs)?;
    Ok((0..prompts.len()).map(|i| argmax(logits.row(i))).collect())
}

pub fn evaluate_recall(params: &Parameters<f32>, prompts: &[PromptInstance]) -> Result<Recall> {
    if prompts.is_empty() {
        return Ok(Recall {
            total: 0,
            correct: 0,
            accuracy: None,
        });
    }
    let preds = predictions(params, prompts)?;
    let correct = preds
        .iter()
        .zip(prompts)
        .filter(|(p, q)| **p == q.answer)
        .count();
    Ok(Recall {
        total: prompts.len(),
        correct,
        accuracy: Some(correct as f64 / prompts.len() as f64),
    })
}

struct Probes {
    entity: Vec<PromptInstance>,
    relation: Vec<PromptInstance>,
}

impl Probes {
    fn recall(&self, params: &Parameters<f32>) -> Result<(Recall, Recall)> {
        Ok((
            evaluate_recall(params, &self.entity)?,
            evaluate_recall(params, &self.relation)?,
        ))
    }
}

/// Mean answer cross-entropy of one packed batch and its gradients, in
/// [`Parameters::named_tensors`] order.
pub fn batch_loss_and_grads(
    params: &Parameters<f32>,
    batch: &[PromptInstance],
) -> Result<(f64, Vec<Tensor<f32>>)> {
    let tape = Tape::new();
    let pv = ParamVars::new(&tape, params, |_| true);
    let segments = pack_segments(batch.iter().map(|p| p.tokens.len()));
    let tokens: Vec<usize> = batch
        .iter()
        .flat_map(|p| p.tokens.iter().copied())
        .collect();
    let answers: Vec<usize> = batch.iter().map(|p| p.answer).collect();
    let h = pv.blocks(
        pv.embed(&tokens, &segments)?,
        &segments,
        0..params.config.n_layers,
    )?;
    let loss = pv.answer_loss(h, &segments, &answers)?;
    let value = loss.value().item() as f64;
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    let mut grads = tape.backward(&loss)?;
    Ok((value, pv.all().iter().map(|v| grads.take(v)).collect()))
}

/// Trains until both families reach the recall target or the epoch cap.
pub fn train(
    params: Parameters<f32>,
    world: &World,
    config: &TrainConfig,
) -> Result<(Parameters<f32>, RecallReport)> {
    train_with_progress(params, world, config, |_, _, _| {})
}

/// [`train`] with a callback receiving `(epoch, mean loss, recall pair)`
/// after every epoch; the recall pair is present on evaluation epochs.
pub fn train_with_progress(
    mut params: Parameters<f32>,
    world: &World,
    config: &TrainConfig,
    mut progress: impl FnMut(usize, f64, Option<(f64, f64)>),
) -> Result<(Parameters<f32>, RecallReport)> {
    config.validate()?;
    params.validate()?;
    let tokenizer = world.tokenizer()?;
    if tokenizer.vocab_size() != params.config.vocab_size {
        return Err(Error::Config(format!(
            "world vocabulary has {} tokens, model expects {}",
            tokenizer.vocab_size(),
            params.config.vocab_size
        )));
    }
    let max_prompt = training_prompts(world, &tokenizer)?
        .iter()
        .map(|p| p.tokens.len())
        .max()
        .unwrap_or(0);
    if max_prompt + config.max_prefix > params.config.max_len {
        return Err(Error::Config(format!(
            "prompts of {max_prompt} tokens plus {} prefix tokens exceed context {}",
            config.max_prefix, params.config.max_len
        )));
    }
    let examples = training_prompts(world, &tokenizer)?;
    let probes = Probes {
        entity: probe_prompts(world, &tokenizer, Perspective::Entity, false)?,
        relation: probe_prompts(world, &tokenizer, Perspective::Relation, false)?,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    });
    let sgd = Sgd { lr: config.lr };
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut loss_curve = Vec::new();
    let mut step = 0usize;
    let mut reached = false;
    let mut epochs_run = 0;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<PromptInstance> = chunk
                .iter()
                .map(|&i| {
                    examples[i].with_prefix(&tokenizer.random_prefix(&mut rng, config.max_prefix))
                })
                .collect();
            let (loss, grads) = match batch_loss_and_grads(&params, &batch) {
                Err(Error::Numeric(_)) => (f64::NAN, Vec::new()),
                other => other?,
            };
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    step,
                    last_good: Box::new(params),
                });
            }
            let grad_refs: Vec<&Tensor<f32>> = grads.iter().collect();
            let mut slots = params.tensors_mut();
            match config.optimizer {
                OptimizerKind::Adam => adam.step(&mut slots, &grad_refs)?,
                OptimizerKind::Sgd => sgd.step(&mut slots, &grad_refs)?,
            }
            total += loss * batch.len() as f64;
            count += batch.len();
            step += 1;
        }
        let mean = total / count.max(1) as f64;
        loss_curve.push(mean);
        epochs_run = epoch + 1;
        let last = epoch + 1 == config.epochs;
        if (epoch + 1) % config.eval_every == 0 || last {
            let (e, r) = probes.recall(&params)?;
            progress(epoch + 1, mean, Some((e.value(), r.value())));
            if e.value() >= config.recall_target && r.value() >= config.recall_target {
                reached = true;
                break;
            }
        } else {
            progress(epoch + 1, mean, None);
        }
    }

    let (entity, relation) = probes.recall(&params)?;
    reached = reached
        || (entity.value() >= config.recall_target && relation.value() >= config.recall_target);
    let report = RecallReport {
        entity,
        relation,
        held_out_entity: evaluate_recall(
            &params,
            &probe_prompts(world, &tokenizer, Perspective::Entity, true)?,
        )?,
        held_out_relation: evaluate_recall(
            &params,
            &probe_prompts(world, &tokenizer, Perspective::Relation, true)?,
        )?,
        loss_curve,
        epochs_run,
        recall_target: config.recall_target,
        reached_target: reached,
    };
    Ok((params, report))
}

/// Refuses to proceed when the base model has not stored the facts.
pub fn check_recall_gate(report: &RecallReport, gate: f64) -> Result<()> {
    let worst = report.min_train_recall();
    if worst < gate {
        return Err(Error::RecallGate(format!(
            "base recall {worst:.3} below gate {gate:.2} (entity {:.3}, relation {:.3})",
            report.entity.value(),
            report.relation.value()
        )));
    }
    Ok(())
}
