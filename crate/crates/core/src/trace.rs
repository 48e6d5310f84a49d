// SPDX-License-Identifier: MIT OR Apache-2.0

//! Causal tracing: clean, corrupted and corrupted-with-restoration runs,
//! indirect effects, and their average over a fact set.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    answer_probability, final_logits, forward, forward_intervened, run_blocks, ActivationTape,
    Intervention, Parameters, Site, SiteHook,
};
use crate::tensor::kernels::{pack_segments, Segment};
use crate::tensor::Tensor;
use crate::world::{Perspective, PromptInstance, Span};

/// Which tokens receive embedding noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptSpan {
    Subject,
    Relation,
    AllPrompt,
}

impl CorruptSpan {
    pub fn for_perspective(p: Perspective) -> Self {
        match p {
            Perspective::Entity => CorruptSpan::Subject,
            Perspective::Relation => CorruptSpan::Relation,
        }
    }

    pub fn span(&self, prompt: &PromptInstance) -> Span {
        match self {
            CorruptSpan::Subject => prompt.subject,
            CorruptSpan::Relation => prompt.relation,
            CorruptSpan::AllPrompt => Span {
                start: 0,
                end: prompt.tokens.len(),
            },
        }
    }
}

/// Noise applied to the corrupted span's embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub span: CorruptSpan,
    /// Standard deviation ν of the Gaussian noise; `None` until computed
    /// for a checkpoint.
    pub scale: Option<f64>,
    pub samples: usize,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(span: CorruptSpan, scale: f64, samples: usize, seed: u64) -> Self {
        Self {
            span,
            scale: Some(scale),
            samples,
            seed,
        }
    }

    fn scale(&self) -> Result<f64> {
        match self.scale {
            Some(v) if v >= 0.0 && v.is_finite() => Ok(v),
            Some(v) => Err(Error::Spec(format!(
                "noise scale {v} must be a non-negative number"
            ))),
            None => Err(Error::Spec(
                "noise scale has not been computed for this checkpoint".into(),
            )),
        }
    }
}

/// ν = 3 × standard deviation of the token-embedding entries.
pub fn noise_scale(params: &Parameters<f32>) -> f64 {
    3.0 * params.embedding_std()
}

/// Module whose outputs are frozen to corrupted values during restoration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sever {
    None,
    Mlp,
    Attn,
}

impl Sever {
    pub fn site(&self) -> Option<Site> {
        match self {
            Sever::None => None,
            Sever::Mlp => Some(Site::MlpOut),
            Sever::Attn => Some(Site::AttnOut),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Sever::None => "none",
            Sever::Mlp => "mlp",
            Sever::Attn => "attn",
        }
    }
}

impl FromStr for Sever {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Sever::None),
            "mlp" => Ok(Sever::Mlp),
            "attn" => Ok(Sever::Attn),
            other => Err(Error::Config(format!("unknown sever module {other:?}"))),
        }
    }
}

impl fmt::Display for Sever {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Parses `hidden`, `mlp` or `attn` into a restorable site.
pub fn parse_site(s: &str) -> Result<Site> {
    match s {
        "hidden" => Ok(Site::Hidden),
        "mlp" => Ok(Site::MlpOut),
        "attn" => Ok(Site::AttnOut),
        other => Err(Error::Config(format!("unknown trace site {other:?}"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSpec {
    pub noise: NoiseSpec,
    pub site: Site,
    /// Odd number of consecutive layers restored together.
    pub window: usize,
    pub sever: Sever,
}

impl TraceSpec {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        let err = |m: String| Err(Error::Spec(m));
        if self.window.is_multiple_of(2) {
            return err(format!("restore window {} must be odd", self.window));
        }
        if self.window > n_layers {
            return err(format!(
                "restore window {} exceeds {n_layers} layers",
                self.window
            ));
        }
        if self.noise.samples == 0 {
            return err("noise sample count must be positive".into());
        }
        if !matches!(self.site, Site::Hidden | Site::MlpOut | Site::AttnOut) {
            return err(format!("cannot restore site {}", self.site.as_str()));
        }
        if self.sever.site() == Some(self.site) {
            return err(format!("cannot sever {} while restoring it", self.sever));
        }
        self.noise.scale()?;
        Ok(())
    }

    /// Layers restored for a cell centered at `layer`, clipped to the model.
    pub fn window_layers(&self, layer: usize, n_layers: usize) -> (usize, usize) {
        let half = self.window / 2;
        (layer.saturating_sub(half), (layer + half).min(n_layers - 1))
    }
}

/// Position groups used to summarize a fact's IE grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    FirstCorrupted,
    MiddleCorrupted,
    LastCorrupted,
    FirstSubsequent,
    Further,
    LastToken,
}

impl Bucket {
    pub const ALL: [Bucket; 6] = [
        Bucket::FirstCorrupted,
        Bucket::MiddleCorrupted,
        Bucket::LastCorrupted,
        Bucket::FirstSubsequent,
        Bucket::Further,
        Bucket::LastToken,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Bucket::FirstCorrupted => "first_corrupted",
            Bucket::MiddleCorrupted => "middle_corrupted",
            Bucket::LastCorrupted => "last_corrupted",
            Bucket::FirstSubsequent => "first_subsequent",
            Bucket::Further => "further",
            Bucket::LastToken => "last_token",
        }
    }

    pub fn index(&self) -> usize {
        Bucket::ALL.iter().position(|b| b == self).expect("listed")
    }

    pub fn is_corrupted(&self) -> bool {
        matches!(
            self,
            Bucket::FirstCorrupted | Bucket::MiddleCorrupted | Bucket::LastCorrupted
        )
    }
}

/// Positions of each bucket for a prompt of length `len` whose corrupted
/// span is `span`. The final position always belongs to `LastToken` only.
pub fn bucket_positions(span: Span, len: usize) -> [Vec<usize>; 6] {
    let last = len - 1;
    let corrupted: Vec<usize> = (span.start..span.end).filter(|&i| i != last).collect();
    let mut out: [Vec<usize>; 6] = Default::default();
    if let (Some(&first), Some(&end)) = (corrupted.first(), corrupted.last()) {
        out[Bucket::FirstCorrupted.index()] = vec![first];
        out[Bucket::LastCorrupted.index()] = vec![end];
        out[Bucket::MiddleCorrupted.index()] = (first + 1..end).collect();
    }
    if span.end < last {
        out[Bucket::FirstSubsequent.index()] = vec![span.end];
        out[Bucket::Further.index()] = (span.end + 1..last).collect();
    }
    out[Bucket::LastToken.index()] = vec![last];
    out
}

/// Probabilities of the three runs for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTriple {
    pub p_clean: f64,
    /// Mean over noise samples.
    pub p_corrupt: f64,
    /// `restored[position][layer]`, mean over noise samples.
    pub restored: Vec<Vec<f64>>,
}

impl RunTriple {
    pub fn indirect_effect(&self, position: usize, layer: usize) -> f64 {
        indirect_effect(self.restored[position][layer], self.p_corrupt)
    }
}

/// `𝐏*,clean[y] − 𝐏*[y]`.
pub fn indirect_effect(p_restored: f64, p_corrupt: f64) -> f64 {
    p_restored - p_corrupt
}

pub fn clean_run(
    params: &Parameters<f32>,
    prompt: &PromptInstance,
) -> Result<(f64, ActivationTape<f32>)> {
    let (logits, tape) = forward(params, &prompt.tokens)?;
    Ok((
        answer_probability(logits.row(prompt.last_position()), prompt.answer)?,
        tape,
    ))
}

/// The noise draws for one fact: one `[span × d]` tensor per sample.
pub fn noise_draws(
    noise: &NoiseSpec,
    fact_id: usize,
    span_len: usize,
    d: usize,
) -> Result<Vec<Tensor<f32>>> {
    let scale = noise.scale()?;
    let mut rng = ChaCha8Rng::seed_from_u64(
        noise.seed ^ (fact_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
    );
    Ok((0..noise.samples)
        .map(|_| {
            let data = (0..span_len * d)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (z * scale) as f32
                })
                .collect();
            Tensor::new(vec![span_len, d], data).expect("sized")
        })
        .collect())
}

/// Mean anchored at the first value, so identical samples average to
/// themselves exactly.
fn sample_mean(values: &[f64]) -> f64 {
    let first = values[0];
    first + values.iter().map(|v| v - first).sum::<f64>() / values.len() as f64
}

fn noise_intervention(span: Span, noise: &Tensor<f32>) -> Intervention<f32> {
    Intervention::add_noise((span.start..span.end).collect(), noise.clone())
}

/// Mean corrupted probability and the per-sample corrupted tapes.
pub fn corrupted_run(
    params: &Parameters<f32>,
    prompt: &PromptInstance,
    noise: &NoiseSpec,
    fact_id: usize,
) -> Result<(f64, Vec<ActivationTape<f32>>)> {
    let span = noise.span.span(prompt);
    if span.is_empty() {
        return Err(Error::Spec("corrupted span is empty".into()));
    }
    let draws = noise_draws(noise, fact_id, span.len(), params.config.d_model)?;
    let mut probs = Vec::with_capacity(draws.len());
    let mut tapes = Vec::with_capacity(draws.len());
    for eps in &draws {
        let (logits, tape) = forward_intervened(
            params,
            &prompt.tokens,
            &[noise_intervention(span, eps)],
            &[],
        )?;
        probs.push(answer_probability(
            logits.row(prompt.last_position()),
            prompt.answer,
        )?);
        tapes.push(tape);
    }
    Ok((sample_mean(&probs), tapes))
}

/// One restored run computed directly with the intervention machinery.
#[allow(clippy::too_many_arguments)]
pub fn restored_run(
    params: &Parameters<f32>,
    prompt: &PromptInstance,
    clean: &ActivationTape<f32>,
    corrupted: &[ActivationTape<f32>],
    spec: &TraceSpec,
    fact_id: usize,
    position: usize,
    layer: usize,
) -> Result<f64> {
    let n_layers = params.config.n_layers;
    spec.validate(n_layers)?;
    if position >= prompt.tokens.len() || layer >= n_layers {
        return Err(Error::Spec(format!(
            "cell ({position}, {layer}) outside the grid"
        )));
    }
    let span = spec.noise.span.span(prompt);
    let draws = noise_draws(&spec.noise, fact_id, span.len(), params.config.d_model)?;
    let (lo, hi) = spec.window_layers(layer, n_layers);
    let mut probs = Vec::with_capacity(draws.len());
    for (eps, tape) in draws.iter().zip(corrupted) {
        let mut ivs = vec![noise_intervention(span, eps)];
        if let Some(site) = spec.sever.site() {
            ivs.push(Intervention::freeze(
                site,
                vec![position],
                (0..n_layers).collect(),
                1,
            ));
        }
        ivs.push(Intervention::restore(
            spec.site,
            vec![position],
            (lo..=hi).collect(),
            0,
        ));
        let (logits, _) = forward_intervened(params, &prompt.tokens, &ivs, &[clean, tape])?;
        probs.push(answer_probability(
            logits.row(prompt.last_position()),
            prompt.answer,
        )?);
    }
    Ok(sample_mean(&probs))
}

struct SweepHook<'a> {
    site: Site,
    window: (usize, usize),
    sever: Option<Site>,
    /// `(row, position, sample)` per packed sequence.
    targets: Vec<(usize, usize, usize)>,
    clean: &'a ActivationTape<f32>,
    corrupted: &'a [ActivationTape<f32>],
}

impl SiteHook<f32> for SweepHook<'_> {
    fn apply(&mut self, layer: usize, site: Site, value: &mut Tensor<f32>) -> Result<()> {
        if Some(site) == self.sever {
            for &(row, pos, s) in &self.targets {
                value
                    .row_mut(row)
                    .copy_from_slice(self.corrupted[s].site(site, layer).row(pos));
            }
        }
        if site == self.site && (self.window.0..=self.window.1).contains(&layer) {
            for &(row, pos, _) in &self.targets {
                value
                    .row_mut(row)
                    .copy_from_slice(self.clean.site(site, layer).row(pos));
            }
        }
        Ok(())
    }
}

/// Restored probabilities for every `(position, layer)`, computed as one
/// packed batch per layer that starts from the corrupted state entering
/// the restoration window.
pub fn restored_sweep(
    params: &Parameters<f32>,
    prompt: &PromptInstance,
    clean: &ActivationTape<f32>,
    corrupted: &[ActivationTape<f32>],
    spec: &TraceSpec,
) -> Result<Vec<Vec<f64>>> {
    let n_layers = params.config.n_layers;
    spec.validate(n_layers)?;
    let len = prompt.tokens.len();
    let samples = corrupted.len();
    let mut out = vec![vec![0.0; n_layers]; len];
    for layer in 0..n_layers {
        let window = spec.window_layers(layer, n_layers);
        let lo = window.0;
        let segments = pack_segments(std::iter::repeat_n(len, len * samples));
        let mut rows = Vec::with_capacity(len * len * samples);
        let mut targets = Vec::with_capacity(len * samples);
        for pos in 0..len {
            for (s, tape) in corrupted.iter().enumerate() {
                let seg = segments[pos * samples + s];
                targets.push((seg.start + pos, pos, s));
                rows.extend_from_slice(tape.layer_input(lo).data());
            }
        }
        let h = Tensor::new(vec![len * len * samples, params.config.d_model], rows)?;
        let mut hook = SweepHook {
            site: spec.site,
            window,
            sever: spec.sever.site(),
            targets,
            clean,
            corrupted,
        };
        let h = run_blocks(params, h, &segments, lo..n_layers, &mut hook, None)?;
        let last: Vec<usize> = segments.iter().map(Segment::last_row).collect();
        let logits = final_logits(params, &h.select_rows(&last)?);
        for (pos, row) in out.iter_mut().enumerate() {
            let probs = (0..samples)
                .map(|s| answer_probability(logits.row(pos * samples + s), prompt.answer))
                .collect::<Result<Vec<_>>>()?;
            row[layer] = sample_mean(&probs);
        }
    }
    Ok(out)
}

/// All three runs for one prompt.
pub fn run_triple(
    params: &Parameters<f32>,
    prompt: &PromptInstance,
    spec: &TraceSpec,
    fact_id: usize,
) -> Result<RunTriple> {
    spec.validate(params.config.n_layers)?;
    let (p_clean, clean) = clean_run(params, prompt)?;
    let (p_corrupt, corrupted) = corrupted_run(params, prompt, &spec.noise, fact_id)?;
    let restored = restored_sweep(params, prompt, &clean, &corrupted, spec)?;
    Ok(RunTriple {
        p_clean,
        p_corrupt,
        restored,
    })
}

/// One fact's trace, summarized per bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactTrace {
    pub fact_id: usize,
    pub p_clean: f64,
    pub p_corrupt: f64,
    /// `ie[position][layer]`.
    pub ie: Vec<Vec<f64>>,
    /// Per bucket (in [`Bucket::ALL`] order) the per-layer mean IE over the
    /// bucket's positions, or `None` when the prompt has no such position.
    pub buckets: Vec<Option<Vec<f64>>>,
}

impl FactTrace {
    pub fn from_triple(fact_id: usize, triple: &RunTriple, span: Span) -> Self {
        let len = triple.restored.len();
        let n_layers = triple.restored.first().map_or(0, Vec::len);
        let ie: Vec<Vec<f64>> = (0..len)
            .map(|i| {
                (0..n_layers)
                    .map(|l| triple.indirect_effect(i, l))
                    .collect()
            })
            .collect();
        let buckets = bucket_positions(span, len)
            .iter()
            .map(|positions| {
                (!positions.is_empty()).then(|| {
                    (0..n_layers)
                        .map(|l| {
                            positions.iter().map(|&i| ie[i][l]).sum::<f64>()
                                / positions.len() as f64
                        })
                        .collect()
                })
            })
            .collect();
        Self {
            fact_id,
            p_clean: triple.p_clean,
            p_corrupt: triple.p_corrupt,
            ie,
            buckets,
        }
    }

    /// The IE of restoring every state: the clean probability recovered in full.
    pub fn full_restoration_ie(&self) -> f64 {
        self.p_clean - self.p_corrupt
    }
}

pub fn trace_fact(
    params: &Parameters<f32>,
    prompt: &PromptInstance,
    spec: &TraceSpec,
    fact_id: usize,
) -> Result<FactTrace> {
    let triple = run_triple(params, prompt, spec, fact_id)?;
    Ok(FactTrace::from_triple(
        fact_id,
        &triple,
        spec.noise.span.span(prompt),
    ))
}

/// Order-independent mean: values are sorted before summation.
fn stable_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

/// AIE per bucket and layer for one site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceGrid {
    pub site: Site,
    pub sever: Sever,
    pub window: usize,
    pub n_layers: usize,
    pub fact_count: usize,
    /// `values[bucket][layer]`, `None` for buckets no fact has.
    pub values: Vec<Option<Vec<f64>>>,
    /// Facts contributing to each bucket.
    pub bucket_counts: Vec<usize>,
    pub mean_p_clean: f64,
    pub mean_p_corrupt: f64,
    /// Cells whose IE exceeded the full-restoration IE of their fact.
    pub monotone_violations: usize,
    pub facts: Vec<FactTrace>,
}

impl TraceGrid {
    pub fn from_facts(spec: &TraceSpec, n_layers: usize, facts: Vec<FactTrace>) -> Result<Self> {
        if facts.is_empty() {
            return Err(Error::Spec("cannot aggregate an empty fact set".into()));
        }
        let mut values = Vec::with_capacity(Bucket::ALL.len());
        let mut bucket_counts = Vec::with_capacity(Bucket::ALL.len());
        for b in 0..Bucket::ALL.len() {
            let present: Vec<&Vec<f64>> =
                facts.iter().filter_map(|f| f.buckets[b].as_ref()).collect();
            bucket_counts.push(present.len());
            values.push((!present.is_empty()).then(|| {
                (0..n_layers)
                    .map(|l| stable_mean(&mut present.iter().map(|v| v[l]).collect::<Vec<_>>()))
                    .collect()
            }));
        }
        let monotone_violations = facts
            .iter()
            .map(|f| {
                let full = f.full_restoration_ie();
                f.ie.iter().flatten().filter(|&&v| v > full + 1e-6).count()
            })
            .sum();
        Ok(Self {
            site: spec.site,
            sever: spec.sever,
            window: spec.window,
            n_layers,
            fact_count: facts.len(),
            values,
            bucket_counts,
            mean_p_clean: stable_mean(&mut facts.iter().map(|f| f.p_clean).collect::<Vec<_>>()),
            mean_p_corrupt: stable_mean(&mut facts.iter().map(|f| f.p_corrupt).collect::<Vec<_>>()),
            monotone_violations,
            facts,
        })
    }

    pub fn cell(&self, bucket: Bucket, layer: usize) -> Option<f64> {
        self.values[bucket.index()].as_ref().map(|v| v[layer])
    }

    /// Present cells as `(bucket, layer, value)`.
    pub fn cells(&self) -> Vec<(Bucket, usize, f64)> {
        Bucket::ALL
            .iter()
            .filter_map(|&b| self.values[b.index()].as_ref().map(|v| (b, v)))
            .flat_map(|(b, v)| v.iter().enumerate().map(move |(l, &x)| (b, l, x)))
            .collect()
    }

    pub fn max_cell(&self) -> Option<(Bucket, usize, f64)> {
        self.cells().into_iter().max_by(|a, b| a.2.total_cmp(&b.2))
    }

    pub fn median(&self) -> Option<f64> {
        let mut v: Vec<f64> = self.cells().into_iter().map(|c| c.2).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        Some(if n % 2 == 1 {
            v[n / 2]
        } else {
            (v[n / 2 - 1] + v[n / 2]) / 2.0
        })
    }
}

/// Traces every `(fact id, prompt)` in parallel and averages.
pub fn trace_fact_set(
    params: &Parameters<f32>,
    prompts: &[(usize, PromptInstance)],
    spec: &TraceSpec,
) -> Result<TraceGrid> {
    spec.validate(params.config.n_layers)?;
    let facts = prompts
        .par_iter()
        .map(|(id, p)| trace_fact(params, p, spec, *id))
        .collect::<Result<Vec<_>>>()?;
    TraceGrid::from_facts(spec, params.config.n_layers, facts)
}

/// [`trace_fact_set`] with a module's outputs frozen at the restored position.
pub fn severed_trace(
    params: &Parameters<f32>,
    prompts: &[(usize, PromptInstance)],
    spec: &TraceSpec,
) -> Result<TraceGrid> {
    trace_fact_set(params, prompts, spec)
}
