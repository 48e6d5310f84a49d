// SPDX-License-Identifier: MIT OR Apache-2.0

//! Locate-then-edit: rewrite one fact by replacing the MLP output matrix of
//! a single layer with the solution of a retention-plus-update least-squares
//! problem whose targets come from optimized residual vectors.

pub mod solver;

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::taped::ParamVars;
use crate::model::{
    answer_probability, argmax, forward, forward_intervened, last_logits, Intervention, Parameters,
    Site,
};
use crate::tensor::kernels::{pack_segments, Segment};
use crate::tensor::{Adam, AdamConfig, Tape, Tensor};
use crate::trace::TraceGrid;
use crate::world::{Fact, Perspective, PromptInstance, Tokenizer, World};

pub use solver::{default_lambda, objective, solve_weight_update, SolveDiagnostics, SolverKind};

/// Where in the prompt the key vector is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyRule {
    LastSubjectToken,
    LastRelationToken,
}

impl KeyRule {
    pub fn for_perspective(p: Perspective) -> Self {
        match p {
            Perspective::Entity => KeyRule::LastSubjectToken,
            Perspective::Relation => KeyRule::LastRelationToken,
        }
    }

    pub fn position(&self, prompt: &PromptInstance) -> Result<usize> {
        let span = match self {
            KeyRule::LastSubjectToken => prompt.subject,
            KeyRule::LastRelationToken => prompt.relation,
        };
        if span.is_empty() || span.end > prompt.tokens.len() {
            return Err(Error::Span(format!(
                "key span {span:?} outside a prompt of {} tokens",
                prompt.tokens.len()
            )));
        }
        Ok(span.last())
    }
}

/// Rewrite `fact` so that `prompt` completes with `new_object`.
#[derive(Debug, Clone, PartialEq)]
pub struct EditRequest {
    pub fact_id: usize,
    pub fact: Fact,
    pub new_object: usize,
    pub perspective: Perspective,
    /// Verbalization of the fact whose answer is the new object's token.
    pub prompt: PromptInstance,
    /// Token of the original object.
    pub original: usize,
}

impl EditRequest {
    /// Builds a request through a training template of `perspective`.
    pub fn new(
        world: &World,
        tokenizer: &Tokenizer,
        fact_id: usize,
        new_object: usize,
        perspective: Perspective,
        template_id: usize,
    ) -> Result<Self> {
        let fact = *world
            .facts
            .get(fact_id)
            .ok_or_else(|| Error::Index(format!("fact {fact_id} of {}", world.facts.len())))?;
        if new_object == fact.o {
            return Err(Error::Spec(format!(
                "fact {fact_id}: new object equals the current one"
            )));
        }
        if !world.object_pool(fact.r).contains(&new_object) {
            return Err(Error::Spec(format!(
                "fact {fact_id}: entity {new_object} is not in the object pool of relation {}",
                fact.r
            )));
        }
        let split = world.split_probe_sets()?;
        if !split.get(fact.r, perspective).train.contains(&template_id) {
            return Err(Error::Spec(format!(
                "template {template_id} is not a training template of the {perspective} family"
            )));
        }
        let prompt = world.verbalize(tokenizer, &fact, perspective, template_id)?;
        Ok(Self {
            fact_id,
            fact,
            new_object,
            perspective,
            original: prompt.answer,
            prompt: prompt.with_answer(tokenizer.entity(new_object)),
        })
    }

    pub fn key_rule(&self) -> KeyRule {
        KeyRule::for_perspective(self.perspective)
    }

    pub fn target(&self) -> usize {
        self.prompt.answer
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditConfig {
    /// Edited block; see [`target_layer`] for the traced default.
    pub layer: usize,
    pub delta_steps: usize,
    /// Initial step size of the backtracking search.
    pub delta_lr: f64,
    /// Cap on `‖δ‖` as a multiple of the mean hidden-state norm at the layer.
    pub norm_cap_factor: f64,
    /// Optimization stops once the bare prompt reaches this probability.
    pub target_probability: f64,
    /// Accepted steps without loss improvement before giving up.
    pub stall_steps: usize,
    /// Retention pairs `n`.
    pub preserve: usize,
    /// Prefix augmentations `N`; the first is always the bare prompt.
    pub augment: usize,
    pub max_prefix: usize,
    /// Ridge strength; `None` picks [`default_lambda`].
    pub lambda: Option<f64>,
    pub solver: SolverKind,
    pub seed: u64,
}

impl EditConfig {
    pub fn new(layer: usize) -> Self {
        Self {
            layer,
            delta_steps: 300,
            delta_lr: 0.5,
            norm_cap_factor: 4.0,
            target_probability: 0.95,
            stall_steps: 50,
            preserve: 50,
            augment: 8,
            max_prefix: 3,
            lambda: None,
            solver: SolverKind::Anchored,
            seed: 0,
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.layer >= n_layers {
            return Err(Error::Config(format!(
                "edit layer {} >= {n_layers}",
                self.layer
            )));
        }
        if self.augment == 0 {
            return Err(Error::Config(
                "at least one prompt augmentation is required".into(),
            ));
        }
        if let Some(l) = self.lambda {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("ridge λ = {l} must be positive")));
            }
        }
        if !(self.delta_lr > 0.0 && self.norm_cap_factor > 0.0) || self.stall_steps == 0 {
            return Err(Error::Config(
                "δ step size, norm cap and stall window must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.target_probability) {
            return Err(Error::Config(format!(
                "target probability {} outside [0, 1]",
                self.target_probability
            )));
        }
        Ok(())
    }
}

/// The layer holding the largest cell of an MLP-site trace grid.
pub fn target_layer(mlp_grid: &TraceGrid) -> Result<usize> {
    if mlp_grid.site != Site::MlpOut {
        return Err(Error::Config(format!(
            "edit layer must come from an mlp grid, got {}",
            mlp_grid.site.as_str()
        )));
    }
    mlp_grid
        .max_cell()
        .map(|(_, layer, _)| layer)
        .ok_or_else(|| Error::Config("empty trace grid".into()))
}

fn mix_seed(seed: u64, fact_id: usize) -> u64 {
    seed ^ (fact_id as u64)
        .wrapping_add(1)
        .wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// The bare prompt followed by `n − 1` copies with random prefixes.
pub fn augmented_prompts(
    prompt: &PromptInstance,
    tokenizer: &Tokenizer,
    n: usize,
    max_prefix: usize,
    seed: u64,
) -> Vec<PromptInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|j| {
            if j == 0 {
                prompt.clone()
            } else {
                prompt.with_prefix(&tokenizer.random_prefix(&mut rng, max_prefix))
            }
        })
        .collect()
}

/// Mean of the input to `W_proj` at the key position of each prompt.
pub fn compute_key(
    params: &Parameters<f32>,
    prompts: &[PromptInstance],
    rule: KeyRule,
    layer: usize,
) -> Result<Tensor<f32>> {
    if prompts.is_empty() {
        return Err(Error::Config("no prompts to average a key over".into()));
    }
    if layer >= params.config.n_layers {
        return Err(Error::Config(format!(
            "layer {layer} >= {}",
            params.config.n_layers
        )));
    }
    let f = params.config.d_ff;
    let mut acc = vec![0.0f64; f];
    for p in prompts {
        let pos = rule.position(p)?;
        let (_, tape) = forward(params, &p.tokens)?;
        for (a, &x) in acc.iter_mut().zip(tape.mlp_keys[layer].row(pos)) {
            *a += x as f64;
        }
    }
    let n = prompts.len() as f64;
    Tensor::new(
        vec![1, f],
        acc.into_iter().map(|a| (a / n) as f32).collect(),
    )
}

/// An optimized key/value pair for one request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyValuePair {
    pub key: Vec<f32>,
    /// Hidden state at the key position of the bare prompt, layer `l*`.
    pub hidden: Vec<f32>,
    pub delta: Vec<f32>,
    /// `hidden + δ`.
    pub value: Vec<f32>,
    /// `key · W_proj + δ`: the output the edited matrix should produce.
    pub target_output: Vec<f32>,
    pub norm_cap: f64,
    pub delta_norm: f64,
    pub steps: usize,
    /// Loss after each accepted step, starting at `δ = 0`.
    pub losses: Vec<f64>,
    /// Smallest target probability over the augmented prompts at the end.
    pub min_probability: f64,
    /// Target probability on the bare prompt at the end.
    pub probability: f64,
    pub reached_target: bool,
}

struct DeltaProblem<'a> {
    params: &'a Parameters<f32>,
    layer: usize,
    hidden: Tensor<f32>,
    segments: Vec<Segment>,
    key_rows: Vec<usize>,
    last_rows: Vec<usize>,
    answers: Vec<usize>,
}

impl DeltaProblem<'_> {
    /// Mean loss, its gradient in δ, and the per-prompt target probabilities.
    fn eval(&self, delta: &Tensor<f32>) -> Result<(f64, Tensor<f32>, Vec<f64>)> {
        let tape = Tape::new();
        let pv = ParamVars::new(&tape, self.params, |_| false);
        let d = tape.var(delta.clone());
        let h = tape.constant(self.hidden.clone());
        let src = d.gather_rows(&vec![0; self.key_rows.len()])?;
        let h = h.scatter_add(&src, &self.key_rows)?;
        let out = pv.blocks(
            h,
            &self.segments,
            self.layer + 1..self.params.config.n_layers,
        )?;
        let logits = pv.logits_at(out, &self.last_rows)?;
        let loss = logits.cross_entropy(&self.answers)?;
        let lv = logits.value();
        let probs = self
            .answers
            .iter()
            .enumerate()
            .map(|(i, &a)| answer_probability(lv.row(i), a))
            .collect::<Result<Vec<_>>>()?;
        let value = loss.value().item() as f64;
        let grads = tape.backward(&loss)?;
        Ok((value, grads.wrt(&d), probs))
    }
}

fn project(delta: &mut Tensor<f32>, cap: f64) {
    let n = delta.norm() as f64;
    if n > cap {
        let s = (cap / n) as f32;
        for x in delta.data_mut() {
            *x *= s;
        }
    }
}

/// Finds the residual `δ` added to the layer's hidden state at the key
/// position that makes the target likely, by projected gradient descent
/// with backtracking so that the recorded loss never increases.
pub fn optimize_value(
    params: &Parameters<f32>,
    tokenizer: &Tokenizer,
    request: &EditRequest,
    config: &EditConfig,
) -> Result<KeyValuePair> {
    config.validate(params.config.n_layers)?;
    let rule = request.key_rule();
    let bare = &request.prompt;
    let pre = argmax(last_logits(params, std::slice::from_ref(&bare.tokens))?.row(0));
    if pre != request.original {
        return Err(Error::Evaluation(format!(
            "fact {}: the model predicts token {pre}, not the original object {}",
            request.fact_id, request.original
        )));
    }
    let prompts = augmented_prompts(
        bare,
        tokenizer,
        config.augment,
        config.max_prefix,
        mix_seed(config.seed, request.fact_id),
    );
    let layer = config.layer;
    let d = params.config.d_model;

    let mut rows = Vec::new();
    let mut key_rows = Vec::new();
    let mut norm_sum = 0.0;
    let mut norm_count = 0usize;
    let segments = pack_segments(prompts.iter().map(|p| p.tokens.len()));
    let mut bare_hidden = Vec::new();
    for (p, seg) in prompts.iter().zip(&segments) {
        let pos = rule.position(p)?;
        let (_, tape) = forward(params, &p.tokens)?;
        let h = &tape.hidden[layer];
        for r in 0..h.rows() {
            norm_sum += h
                .row(r)
                .iter()
                .map(|&x| (x as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            norm_count += 1;
        }
        if bare_hidden.is_empty() {
            bare_hidden = h.row(pos).to_vec();
        }
        rows.extend_from_slice(h.data());
        key_rows.push(seg.start + pos);
    }
    let cap = config.norm_cap_factor * norm_sum / norm_count as f64;
    let problem = DeltaProblem {
        params,
        layer,
        hidden: Tensor::new(vec![rows.len() / d, d], rows)?,
        last_rows: segments.iter().map(Segment::last_row).collect(),
        segments,
        key_rows,
        answers: vec![request.target(); prompts.len()],
    };

    let mut delta = Tensor::zeros(&[1, d]);
    let (mut loss, mut grad, mut probs) = problem.eval(&delta)?;
    let mut losses = vec![loss];
    let mut lr = config.delta_lr;
    let mut steps = 0;
    let mut best = loss;
    let mut since_best = 0usize;
    let min_p = |p: &[f64]| p.iter().copied().fold(f64::INFINITY, f64::min);
    while steps < config.delta_steps && probs[0] < config.target_probability {
        let accepted = loop {
            let mut cand = delta.sub(&grad.scale(lr as f32))?;
            project(&mut cand, cap);
            let (l, g, p) = problem.eval(&cand)?;
            if l.is_finite() && l <= loss {
                lr *= 1.5;
                break Some((cand, l, g, p));
            }
            lr *= 0.5;
            if lr < 1e-10 {
                break None;
            }
        };
        let Some((cand, l, g, p)) = accepted else {
            return Err(Error::OptimizationStall(format!(
                "fact {}: no descent direction after {steps} steps (loss {loss:.4})",
                request.fact_id
            )));
        };
        delta = cand;
        loss = l;
        grad = g;
        probs = p;
        losses.push(loss);
        steps += 1;
        if loss < best - 1e-6 * best.abs().max(1e-3) {
            best = loss;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.stall_steps {
                return Err(Error::OptimizationStall(format!(
                    "fact {}: loss stuck at {loss:.4} for {} steps",
                    request.fact_id, config.stall_steps
                )));
            }
        }
    }

    let key = compute_key(params, &prompts, rule, layer)?;
    let out = key.matmul(&params.layers[layer].w_proj)?;
    let target_output = out.add(&delta)?;
    let value: Vec<f32> = bare_hidden
        .iter()
        .zip(delta.data())
        .map(|(h, x)| h + x)
        .collect();
    Ok(KeyValuePair {
        key: key.into_data(),
        hidden: bare_hidden,
        delta_norm: delta.norm() as f64,
        delta: delta.into_data(),
        value,
        target_output: target_output.into_data(),
        norm_cap: cap,
        steps,
        losses,
        min_probability: min_p(&probs),
        reached_target: probs[0] >= config.target_probability,
        probability: probs[0],
    })
}

/// Target probability on the bare prompt with `δ` added to the hidden state
/// at the key position of the edited layer, through the intervention API.
pub fn intervened_probability(
    params: &Parameters<f32>,
    request: &EditRequest,
    layer: usize,
    delta: &[f32],
) -> Result<f64> {
    let pos = request.key_rule().position(&request.prompt)?;
    let add = Intervention {
        positions: vec![pos],
        layers: vec![layer],
        site: Site::Hidden,
        action: crate::model::Action::Add(Tensor::new(vec![1, delta.len()], delta.to_vec())?),
    };
    let (logits, _) = forward_intervened(params, &request.prompt.tokens, &[add], &[])?;
    answer_probability(logits.row(logits.rows() - 1), request.target())
}

fn probability(params: &Parameters<f32>, prompt: &PromptInstance, token: usize) -> Result<f64> {
    let logits = last_logits(params, std::slice::from_ref(&prompt.tokens))?;
    answer_probability(logits.row(0), token)
}

/// Keys for retention: facts outside `exclude`, read through the first
/// training template of `perspective`.
pub fn preservation_keys(
    params: &Parameters<f32>,
    world: &World,
    tokenizer: &Tokenizer,
    exclude: &HashSet<(usize, usize)>,
    perspective: Perspective,
    config: &EditConfig,
) -> Result<(Vec<usize>, Tensor<f32>)> {
    let candidates: Vec<usize> = (0..world.facts.len())
        .filter(|&i| !exclude.contains(&(world.facts[i].s, world.facts[i].r)))
        .collect();
    let n = config.preserve.min(candidates.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_0F_7E7A1);
    let mut chosen: Vec<usize> = sample(&mut rng, candidates.len(), n)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    chosen.sort_unstable();
    let split = world.split_probe_sets()?;
    let rule = KeyRule::for_perspective(perspective);
    let keys = chosen
        .par_iter()
        .map(|&i| {
            let fact = &world.facts[i];
            let t = split.get(fact.r, perspective).train[0];
            let prompt = world.verbalize(tokenizer, fact, perspective, t)?;
            let prompts = augmented_prompts(
                &prompt,
                tokenizer,
                config.augment,
                config.max_prefix,
                mix_seed(config.seed, i),
            );
            compute_key(params, &prompts, rule, config.layer)
        })
        .collect::<Result<Vec<_>>>()?;
    let f = params.config.d_ff;
    let data: Vec<f32> = keys.iter().flat_map(|k| k.data().iter().copied()).collect();
    Ok((chosen, Tensor::new(vec![n, f], data)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestTrace {
    pub fact_id: usize,
    pub subject: usize,
    pub relation: usize,
    pub original_object: usize,
    pub new_object: usize,
    pub perspective: Perspective,
    pub key_position: usize,
    pub key_norm: f64,
    pub delta_norm: f64,
    pub norm_cap: f64,
    pub delta_steps: usize,
    pub delta_losses: Vec<f64>,
    pub p_target_before: f64,
    pub p_target_intervened: f64,
    pub p_target_after: f64,
    pub p_original_before: f64,
    pub p_original_after: f64,
    pub success: bool,
    pub solver_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditTrace {
    pub layer: usize,
    pub solver: SolverKind,
    pub lambda: f64,
    pub preserved_facts: Vec<usize>,
    pub max_preserved_residual: f64,
    pub max_update_residual: f64,
    pub condition_estimate: f64,
    /// Frobenius norm of `Ŵ − W`.
    pub weight_change: f64,
    pub requests: Vec<RequestTrace>,
}

/// Applies a batch of edits at `config.layer` and reports what happened.
pub fn apply_edit(
    params: &Parameters<f32>,
    world: &World,
    requests: &[EditRequest],
    config: &EditConfig,
) -> Result<(Parameters<f32>, EditTrace)> {
    config.validate(params.config.n_layers)?;
    let layer = config.layer;
    if requests.is_empty() {
        let trace = EditTrace {
            layer,
            solver: config.solver,
            lambda: config.lambda.unwrap_or(0.0),
            preserved_facts: Vec::new(),
            max_preserved_residual: 0.0,
            max_update_residual: 0.0,
            condition_estimate: 1.0,
            weight_change: 0.0,
            requests: Vec::new(),
        };
        return Ok((params.clone(), trace));
    }
    let mut keys_seen = HashSet::new();
    for r in requests {
        if !keys_seen.insert((r.fact.s, r.fact.r)) {
            return Err(Error::Spec(format!(
                "conflicting requests for subject {} and relation {}",
                r.fact.s, r.fact.r
            )));
        }
    }
    let tokenizer = world.tokenizer()?;
    let pairs = requests
        .par_iter()
        .map(|r| optimize_value(params, &tokenizer, r, config))
        .collect::<Result<Vec<_>>>()?;

    let (preserved, pkeys) = preservation_keys(
        params,
        world,
        &tokenizer,
        &keys_seen,
        requests[0].perspective,
        config,
    )?;
    let w = &params.layers[layer].w_proj;
    let pvals = pkeys.matmul(w)?;
    let (f, d) = (params.config.d_ff, params.config.d_model);
    let mut kdata = pkeys.data().to_vec();
    let mut vdata = pvals.data().to_vec();
    for p in &pairs {
        kdata.extend_from_slice(&p.key);
        vdata.extend_from_slice(&p.target_output);
    }
    let m = preserved.len() + pairs.len();
    let keys = Tensor::new(vec![m, f], kdata)?;
    let values = Tensor::new(vec![m, d], vdata)?;
    let lambda = config.lambda.unwrap_or_else(|| default_lambda(&keys));
    let (w_new, diag) =
        solve_weight_update(w, &keys, &values, preserved.len(), lambda, config.solver)?;
    let weight_change = w_new.sub(w)?.norm() as f64;

    let mut edited = params.clone();
    edited.layers[layer].w_proj = w_new;

    let traces = requests
        .iter()
        .zip(&pairs)
        .enumerate()
        .map(|(i, (r, kv))| {
            let logits_after = last_logits(&edited, std::slice::from_ref(&r.prompt.tokens))?;
            Ok(RequestTrace {
                fact_id: r.fact_id,
                subject: r.fact.s,
                relation: r.fact.r,
                original_object: r.fact.o,
                new_object: r.new_object,
                perspective: r.perspective,
                key_position: r.key_rule().position(&r.prompt)?,
                key_norm: kv
                    .key
                    .iter()
                    .map(|&x| (x as f64).powi(2))
                    .sum::<f64>()
                    .sqrt(),
                delta_norm: kv.delta_norm,
                norm_cap: kv.norm_cap,
                delta_steps: kv.steps,
                delta_losses: kv.losses.clone(),
                p_target_before: probability(params, &r.prompt, r.target())?,
                p_target_intervened: intervened_probability(params, r, layer, &kv.delta)?,
                p_target_after: answer_probability(logits_after.row(0), r.target())?,
                p_original_before: probability(params, &r.prompt, r.original)?,
                p_original_after: answer_probability(logits_after.row(0), r.original)?,
                success: argmax(logits_after.row(0)) == r.target(),
                solver_residual: diag.residuals[preserved.len() + i],
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok((
        edited,
        EditTrace {
            layer,
            solver: config.solver,
            lambda,
            preserved_facts: preserved,
            max_preserved_residual: diag.max_preserved_residual,
            max_update_residual: diag.max_update_residual,
            condition_estimate: diag.condition_estimate,
            weight_change,
            requests: traces,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub lr: f64,
    pub layers: Vec<usize>,
    /// Training stops once every edit prompt reaches this probability.
    pub target_probability: f64,
}

impl FinetuneConfig {
    pub const MAX_STEPS: usize = 5000;
    pub const MAX_LR: f64 = 0.1;

    pub fn new(layer: usize) -> Self {
        Self {
            steps: 200,
            lr: 1e-3,
            layers: vec![layer],
            target_probability: 0.95,
        }
    }
}

/// Plain fine-tuning of the MLP matrices of the chosen layers on the edit
/// prompts.
pub fn finetune_baseline(
    params: &Parameters<f32>,
    requests: &[EditRequest],
    config: &FinetuneConfig,
) -> Result<(Parameters<f32>, Vec<f64>)> {
    if config.steps > FinetuneConfig::MAX_STEPS
        || !(config.lr > 0.0 && config.lr <= FinetuneConfig::MAX_LR)
    {
        return Err(Error::Config(format!(
            "fine-tuning limited to {} steps and lr in (0, {}]",
            FinetuneConfig::MAX_STEPS,
            FinetuneConfig::MAX_LR
        )));
    }
    if let Some(&l) = config.layers.iter().find(|&&l| l >= params.config.n_layers) {
        return Err(Error::Config(format!(
            "fine-tuning layer {l} >= {}",
            params.config.n_layers
        )));
    }
    let mut edited = params.clone();
    if requests.is_empty() || config.steps == 0 {
        return Ok((edited, Vec::new()));
    }
    let names: HashSet<String> = config
        .layers
        .iter()
        .flat_map(|l| {
            [
                format!("layers.{l}.mlp.w_fc"),
                format!("layers.{l}.mlp.w_proj"),
            ]
        })
        .collect();
    let segments = pack_segments(requests.iter().map(|r| r.prompt.tokens.len()));
    let tokens: Vec<usize> = requests
        .iter()
        .flat_map(|r| r.prompt.tokens.iter().copied())
        .collect();
    let answers: Vec<usize> = requests.iter().map(|r| r.target()).collect();
    let mut adam = Adam::new(AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    });
    let mut losses = Vec::new();
    for step in 0..config.steps {
        let tape = Tape::new();
        let pv = ParamVars::new(&tape, &edited, |n| names.contains(n));
        let h = pv.blocks(
            pv.embed(&tokens, &segments)?,
            &segments,
            0..edited.config.n_layers,
        )?;
        let last: Vec<usize> = segments.iter().map(Segment::last_row).collect();
        let logits = pv.logits_at(h, &last)?;
        let loss = logits.cross_entropy(&answers)?;
        let value = loss.value().item() as f64;
        if !value.is_finite() {
            return Err(Error::Training(format!(
                "fine-tuning diverged at step {step}"
            )));
        }
        let lv = logits.value();
        let done = answers
            .iter()
            .enumerate()
            .map(|(i, &a)| answer_probability(lv.row(i), a))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .all(|p| p >= config.target_probability);
        losses.push(value);
        if done {
            break;
        }
        let mut grads = tape.backward(&loss)?;
        let vars = pv.all();
        let named = edited
            .named_tensors()
            .into_iter()
            .map(|(n, _)| n)
            .collect::<Vec<_>>();
        let mut slots = Vec::new();
        let mut gs = Vec::new();
        for ((name, slot), var) in named.iter().zip(edited.tensors_mut()).zip(&vars) {
            if names.contains(name) {
                slots.push(slot);
                gs.push(grads.take(var));
            }
        }
        if gs.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite fine-tuning gradient at step {step}"
            )));
        }
        let refs: Vec<&Tensor<f32>> = gs.iter().collect();
        adam.step(&mut slots, &refs)?;
    }
    Ok((edited, losses))
}
