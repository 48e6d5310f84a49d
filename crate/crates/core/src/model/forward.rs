// SPDX-License-Identifier: MIT OR Apache-2.0

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Parameters;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::kernels::{self, pack_segments, Segment};
use crate::tensor::Tensor;

/// A place in the computation where values can be read or patched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    Embedding,
    Hidden,
    AttnOut,
    MlpOut,
}

impl Site {
    pub fn as_str(&self) -> &'static str {
        match self {
            Site::Embedding => "embedding",
            Site::Hidden => "hidden",
            Site::AttnOut => "attn",
            Site::MlpOut => "mlp",
        }
    }
}

/// Every activation of one uninterrupted pass over a single sequence.
///
/// Layer `l` (0-based) satisfies `hidden[l] = prev + attn[l] + mlp[l]` where
/// `prev` is `hidden[l-1]`, or `embed` for the first layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTape<T: Scalar = f32> {
    /// `h^(0)`: token plus position embeddings, `[T × d]`.
    pub embed: Tensor<T>,
    pub hidden: Vec<Tensor<T>>,
    pub attn: Vec<Tensor<T>>,
    pub mlp: Vec<Tensor<T>>,
    /// Post-activation MLP inputs to `W_proj`, `[T × d_ff]` per layer.
    pub mlp_keys: Vec<Tensor<T>>,
}

impl<T: Scalar> ActivationTape<T> {
    pub fn seq_len(&self) -> usize {
        self.embed.rows()
    }

    pub fn n_layers(&self) -> usize {
        self.hidden.len()
    }

    pub fn site(&self, site: Site, layer: usize) -> &Tensor<T> {
        match site {
            Site::Embedding => &self.embed,
            Site::Hidden => &self.hidden[layer],
            Site::AttnOut => &self.attn[layer],
            Site::MlpOut => &self.mlp[layer],
        }
    }

    /// Residual input to `layer`.
    pub fn layer_input(&self, layer: usize) -> &Tensor<T> {
        if layer == 0 {
            &self.embed
        } else {
            &self.hidden[layer - 1]
        }
    }

    /// Largest violation of `h = h_prev + a + m` over the tape.
    pub fn residual_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for l in 0..self.n_layers() {
            let prev = self.layer_input(l);
            for (i, &h) in self.hidden[l].data().iter().enumerate() {
                let sum = prev.data()[i] + self.attn[l].data()[i] + self.mlp[l].data()[i];
                worst = worst.max((h - sum).abs().to_f64_lossy());
            }
        }
        worst
    }
}

/// What to do at an intervened site.
#[derive(Debug, Clone, PartialEq)]
pub enum Action<T: Scalar = f32> {
    /// Add the given rows (one per target position, in order).
    Add(Tensor<T>),
    /// Overwrite with the value recorded in `references[idx]` (restoration).
    RestoreFrom(usize),
    /// Overwrite with the value recorded in `references[idx]` (severing).
    FreezeTo(usize),
}

/// A patch directive: at every `(position, layer)` of `site`, apply `action`.
///
/// Layers are 0-based block indices; they are ignored for
/// [`Site::Embedding`].
#[derive(Debug, Clone, PartialEq)]
pub struct Intervention<T: Scalar = f32> {
    pub positions: Vec<usize>,
    pub layers: Vec<usize>,
    pub site: Site,
    pub action: Action<T>,
}

impl<T: Scalar> Intervention<T> {
    pub fn add_noise(positions: Vec<usize>, noise: Tensor<T>) -> Self {
        Self {
            positions,
            layers: Vec::new(),
            site: Site::Embedding,
            action: Action::Add(noise),
        }
    }

    pub fn restore(
        site: Site,
        positions: Vec<usize>,
        layers: Vec<usize>,
        reference: usize,
    ) -> Self {
        Self {
            positions,
            layers,
            site,
            action: Action::RestoreFrom(reference),
        }
    }

    pub fn freeze(site: Site, positions: Vec<usize>, layers: Vec<usize>, reference: usize) -> Self {
        Self {
            positions,
            layers,
            site,
            action: Action::FreezeTo(reference),
        }
    }
}

/// Callback invoked right after a site's value is computed and before any
/// consumer reads it.
pub(crate) trait SiteHook<T: Scalar> {
    fn apply(&mut self, layer: usize, site: Site, value: &mut Tensor<T>) -> Result<()>;
}

pub(crate) struct NoHook;

impl<T: Scalar> SiteHook<T> for NoHook {
    fn apply(&mut self, _: usize, _: Site, _: &mut Tensor<T>) -> Result<()> {
        Ok(())
    }
}

struct InterventionHook<'a, T: Scalar> {
    list: &'a [Intervention<T>],
    refs: &'a [&'a ActivationTape<T>],
}

impl<T: Scalar> SiteHook<T> for InterventionHook<'_, T> {
    fn apply(&mut self, layer: usize, site: Site, value: &mut Tensor<T>) -> Result<()> {
        for iv in self.list {
            if iv.site != site || (site != Site::Embedding && !iv.layers.contains(&layer)) {
                continue;
            }
            match &iv.action {
                Action::Add(rows) => {
                    for (i, &p) in iv.positions.iter().enumerate() {
                        for (x, &y) in value.row_mut(p).iter_mut().zip(rows.row(i)) {
                            *x += y;
                        }
                    }
                }
                Action::RestoreFrom(r) | Action::FreezeTo(r) => {
                    let src = self.refs[*r].site(site, layer);
                    for &p in &iv.positions {
                        value.row_mut(p).copy_from_slice(src.row(p));
                    }
                }
            }
        }
        Ok(())
    }
}

fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Tensor<T> {
    x.matmul(w).expect("validated weight shapes")
}

fn layernorm_rows<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    let c = x.cols();
    for row in out.data_mut().chunks_mut(c) {
        kernels::layernorm_row(row, gamma.data(), beta.data());
    }
    out
}

/// Token plus position embeddings for packed sequences.
pub(crate) fn embed<T: Scalar>(
    params: &Parameters<T>,
    tokens: &[usize],
    segments: &[Segment],
) -> Tensor<T> {
    let d = params.config.d_model;
    let mut out = Tensor::zeros(&[tokens.len(), d]);
    for seg in segments {
        for t in 0..seg.len {
            let r = seg.start + t;
            let row = out.row_mut(r);
            for ((x, &e), &p) in row
                .iter_mut()
                .zip(params.wte.row(tokens[r]))
                .zip(params.wpe.row(t))
            {
                *x = e + p;
            }
        }
    }
    out
}

/// Runs blocks `layers` on packed rows `h`, returning the last hidden state.
pub(crate) fn run_blocks<T: Scalar>(
    params: &Parameters<T>,
    mut h: Tensor<T>,
    segments: &[Segment],
    layers: Range<usize>,
    hook: &mut dyn SiteHook<T>,
    mut record: Option<&mut ActivationTape<T>>,
) -> Result<Tensor<T>> {
    let cfg = &params.config;
    for l in layers {
        let p = &params.layers[l];
        let x1 = layernorm_rows(&h, &p.ln1_gamma, &p.ln1_beta);
        let q = linear(&x1, &p.w_q);
        let k = linear(&x1, &p.w_k);
        let v = linear(&x1, &p.w_v);
        let mut z = Tensor::zeros(q.shape());
        kernels::attention_forward(
            q.data(),
            k.data(),
            v.data(),
            cfg.d_model,
            cfg.n_heads,
            segments,
            z.data_mut(),
            None,
        );
        let mut a = linear(&z, &p.w_o);
        hook.apply(l, Site::AttnOut, &mut a)?;

        let mid = h.add(&a)?;
        let x2 = layernorm_rows(&mid, &p.ln2_gamma, &p.ln2_beta);
        let key = linear(&x2, &p.w_fc).map(kernels::gelu);
        let mut m = linear(&key, &p.w_proj);
        hook.apply(l, Site::MlpOut, &mut m)?;

        let mut next = mid.add(&m)?;
        hook.apply(l, Site::Hidden, &mut next)?;
        if let Some(tape) = record.as_deref_mut() {
            tape.attn.push(a);
            tape.mlp.push(m);
            tape.mlp_keys.push(key);
            tape.hidden.push(next.clone());
        }
        h = next;
    }
    Ok(h)
}

/// Final layernorm and unembedding of hidden rows.
pub fn final_logits<T: Scalar>(params: &Parameters<T>, hidden: &Tensor<T>) -> Tensor<T> {
    let x = layernorm_rows(hidden, &params.lnf_gamma, &params.lnf_beta);
    linear(&x, &params.unembed)
}

pub(crate) fn check_tokens<T: Scalar>(params: &Parameters<T>, tokens: &[usize]) -> Result<()> {
    let cfg = &params.config;
    if tokens.is_empty() {
        return Err(Error::Dimension("empty token sequence".into()));
    }
    if tokens.len() > cfg.max_len {
        return Err(Error::Dimension(format!(
            "sequence of {} tokens exceeds context {}",
            tokens.len(),
            cfg.max_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Vocabulary {
            token: bad,
            vocab: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Clean pass over one sequence: logits for every position and the full tape.
pub fn forward<T: Scalar>(
    params: &Parameters<T>,
    tokens: &[usize],
) -> Result<(Tensor<T>, ActivationTape<T>)> {
    forward_intervened(params, tokens, &[], &[])
}

/// Pass over one sequence with patches applied in declaration order.
pub fn forward_intervened<T: Scalar>(
    params: &Parameters<T>,
    tokens: &[usize],
    interventions: &[Intervention<T>],
    references: &[&ActivationTape<T>],
) -> Result<(Tensor<T>, ActivationTape<T>)> {
    check_tokens(params, tokens)?;
    let cfg = &params.config;
    let len = tokens.len();
    for (i, tape) in references.iter().enumerate() {
        if tape.seq_len() != len
            || tape.n_layers() != cfg.n_layers
            || tape.embed.cols() != cfg.d_model
        {
            return Err(Error::Intervention(format!(
                "reference tape {i} has {} positions × {} layers, run has {len} × {}",
                tape.seq_len(),
                tape.n_layers(),
                cfg.n_layers
            )));
        }
    }
    for iv in interventions {
        if let Some(&p) = iv.positions.iter().find(|&&p| p >= len) {
            return Err(Error::Intervention(format!("position {p} >= length {len}")));
        }
        if iv.site != Site::Embedding {
            if let Some(&l) = iv.layers.iter().find(|&&l| l >= cfg.n_layers) {
                return Err(Error::Intervention(format!(
                    "layer {l} >= layer count {}",
                    cfg.n_layers
                )));
            }
        }
        match &iv.action {
            Action::Add(rows) => {
                if rows.rows() != iv.positions.len() || rows.cols() != cfg.d_model {
                    return Err(Error::Intervention(format!(
                        "added tensor {:?} does not match {} positions × {}",
                        rows.shape(),
                        iv.positions.len(),
                        cfg.d_model
                    )));
                }
            }
            Action::RestoreFrom(r) | Action::FreezeTo(r) => {
                if *r >= references.len() {
                    return Err(Error::Intervention(format!("no reference tape {r}")));
                }
            }
        }
    }

    let segments = pack_segments([len]);
    let mut hook = InterventionHook {
        list: interventions,
        refs: references,
    };
    let mut h0 = embed(params, tokens, &segments);
    hook.apply(0, Site::Embedding, &mut h0)?;
    let mut tape = ActivationTape {
        embed: h0.clone(),
        hidden: Vec::with_capacity(cfg.n_layers),
        attn: Vec::with_capacity(cfg.n_layers),
        mlp: Vec::with_capacity(cfg.n_layers),
        mlp_keys: Vec::with_capacity(cfg.n_layers),
    };
    let last = run_blocks(
        params,
        h0,
        &segments,
        0..cfg.n_layers,
        &mut hook,
        Some(&mut tape),
    )?;
    Ok((final_logits(params, &last), tape))
}

/// Logits at the final position of each sequence, `[n × V]`.
///
/// Sequences are packed in fixed-size chunks evaluated in parallel; the
/// result does not depend on the thread count.
pub fn last_logits<T: Scalar>(
    params: &Parameters<T>,
    sequences: &[Vec<usize>],
) -> Result<Tensor<T>> {
    const CHUNK: usize = 128;
    let v = params.config.vocab_size;
    for s in sequences {
        check_tokens(params, s)?;
    }
    let parts: Vec<Result<Tensor<T>>> = sequences
        .par_chunks(CHUNK)
        .map(|chunk| {
            let segments = pack_segments(chunk.iter().map(Vec::len));
            let tokens: Vec<usize> = chunk.iter().flatten().copied().collect();
            let h0 = embed(params, &tokens, &segments);
            let h = run_blocks(
                params,
                h0,
                &segments,
                0..params.config.n_layers,
                &mut NoHook,
                None,
            )?;
            let last: Vec<usize> = segments.iter().map(Segment::last_row).collect();
            Ok(final_logits(params, &h.select_rows(&last)?))
        })
        .collect();
    let mut data = Vec::with_capacity(sequences.len() * v);
    for p in parts {
        data.extend_from_slice(p?.data());
    }
    Tensor::new(vec![sequences.len(), v], data)
}

/// Index of the largest entry (first on ties).
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Softmax probability of `answer` under a single row of logits.
pub fn answer_probability<T: Scalar>(logits: &[T], answer: usize) -> Result<f64> {
    if answer >= logits.len() {
        return Err(Error::Vocabulary {
            token: answer,
            vocab: logits.len(),
        });
    }
    let row: Vec<f64> = logits.iter().map(|v| v.to_f64_lossy()).collect();
    Ok((row[answer] - kernels::logsumexp(&row)).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerParams, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(seed: u64) -> Parameters<f32> {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: 11,
            max_len: 8,
        };
        let mut p = Parameters::init(cfg, seed).unwrap();
        // larger weights so that every path carries signal
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for t in p.tensors_mut() {
            let noise = Tensor::<f32>::randn(t.shape(), 0.3, &mut rng);
            *t = t.add(&noise).unwrap();
        }
        p
    }

    #[test]
    fn deterministic_and_residual() {
        let p = small(1);
        let toks = [1, 4, 2, 9, 3];
        let (l1, t1) = forward(&p, &toks).unwrap();
        let (l2, t2) = forward(&p, &toks).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(t1, t2);
        assert!(t1.residual_error() < 1e-5);
        assert_eq!(t1.hidden.len(), 2);
        assert_eq!(t1.mlp_keys[0].shape(), &[5, 32]);
    }

    #[test]
    fn vocabulary_and_length_errors() {
        let p = small(1);
        assert!(matches!(
            forward(&p, &[1, 11]),
            Err(Error::Vocabulary { .. })
        ));
        assert!(matches!(forward(&p, &[1; 9]), Err(Error::Dimension(_))));
    }

    #[test]
    fn causality() {
        let p = small(2);
        let (a, _) = forward(&p, &[3, 1, 4, 1, 5]).unwrap();
        let (b, _) = forward(&p, &[3, 1, 4, 7, 2]).unwrap();
        for r in 0..3 {
            assert_eq!(a.row(r), b.row(r));
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn empty_intervention_list_is_forward() {
        let p = small(3);
        let toks = [2, 7, 1];
        let plain = forward(&p, &toks).unwrap();
        let (_, reference) = forward(&p, &[5, 5, 5]).unwrap();
        let patched = forward_intervened(&p, &toks, &[], &[&reference]).unwrap();
        assert_eq!(plain, patched);
    }

    #[test]
    fn full_restoration_recovers_clean_logits() {
        let p = small(4);
        let toks = [2, 7, 1, 6];
        let (clean_logits, clean) = forward(&p, &toks).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise = Tensor::randn(&[2, 16], 3.0, &mut rng);
        let corrupt = Intervention::add_noise(vec![0, 1], noise);
        let restore = Intervention::restore(Site::Hidden, (0..4).collect(), (0..2).collect(), 0);
        let (noisy, _) =
            forward_intervened(&p, &toks, std::slice::from_ref(&corrupt), &[]).unwrap();
        assert!(noisy.max_abs_diff(&clean_logits) > 1e-3);
        let (restored, _) = forward_intervened(&p, &toks, &[corrupt, restore], &[&clean]).unwrap();
        assert!(restored.max_abs_diff(&clean_logits) < 1e-4);
    }

    #[test]
    fn intervention_errors() {
        let p = small(5);
        let (_, short) = forward(&p, &[1, 2]).unwrap();
        let iv = Intervention::restore(Site::Hidden, vec![0], vec![0], 0);
        assert!(matches!(
            forward_intervened(&p, &[1, 2, 3], std::slice::from_ref(&iv), &[&short]),
            Err(Error::Intervention(_))
        ));
        let bad_layer = Intervention::<f32>::restore(Site::Hidden, vec![0], vec![5], 0);
        let (_, ok) = forward(&p, &[1, 2, 3]).unwrap();
        assert!(forward_intervened(&p, &[1, 2, 3], &[bad_layer], &[&ok]).is_err());
    }

    #[test]
    fn freezing_mlp_changes_restored_run() {
        let p = small(6);
        let toks = [4, 8, 2, 5];
        let (_, clean) = forward(&p, &toks).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let corrupt = Intervention::add_noise(vec![0, 1], Tensor::randn(&[2, 16], 3.0, &mut rng));
        let (_, corrupted) =
            forward_intervened(&p, &toks, std::slice::from_ref(&corrupt), &[]).unwrap();
        let restore = Intervention::restore(Site::Hidden, vec![1], vec![0], 0);
        let freeze = Intervention::freeze(Site::MlpOut, vec![1], vec![0, 1], 1);
        let (unsevered, _) = forward_intervened(
            &p,
            &toks,
            &[corrupt.clone(), restore.clone()],
            &[&clean, &corrupted],
        )
        .unwrap();
        let (severed, _) = forward_intervened(
            &p,
            &toks,
            &[corrupt, freeze, restore],
            &[&clean, &corrupted],
        )
        .unwrap();
        assert!(severed.max_abs_diff(&unsevered) > 1e-4);
    }

    #[test]
    fn batched_last_logits_match_single_runs() {
        let p = small(7);
        let seqs: Vec<Vec<usize>> = (0..300)
            .map(|i| (0..1 + i % 6).map(|j| (i * 7 + j * 3) % 11).collect())
            .collect();
        let batch = last_logits(&p, &seqs).unwrap();
        for idx in [0, 5, 128, 255, 299] {
            let (single, _) = forward(&p, &seqs[idx]).unwrap();
            let row = single.row(seqs[idx].len() - 1);
            for (a, b) in batch.row(idx).iter().zip(row) {
                assert!((a - b).abs() < 1e-5);
            }
        }
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0, -1.0]), 1);
    }

    #[test]
    fn answer_probability_cases() {
        let uniform = vec![0.0f32; 10];
        assert!((answer_probability(&uniform, 3).unwrap() - 0.1).abs() < 1e-12);
        let mut sat = vec![0.0f32; 10];
        sat[7] = 1e4;
        assert!((answer_probability(&sat, 7).unwrap() - 1.0).abs() < 1e-9);
        assert!(answer_probability(&uniform, 10).is_err());
        // log-sum-exp oracle on random logits
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = Tensor::<f32>::randn(&[1, 10], 2.0, &mut rng);
        let row: Vec<f64> = logits.data().iter().map(|&v| v as f64).collect();
        let denom: f64 = row.iter().map(|v| v.exp()).sum();
        for a in 0..10 {
            let want = row[a].exp() / denom;
            assert!((answer_probability(logits.data(), a).unwrap() - want).abs() < 1e-6);
        }
    }

    /// Hand-unrolled single-layer, single-head, width-4 forward pass in f64.
    #[test]
    fn one_layer_matches_unrolled_oracle() {
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 4,
            n_heads: 1,
            d_ff: 8,
            vocab_size: 5,
            max_len: 4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut r = |s: &[usize]| Tensor::<f64>::randn(s, 0.7, &mut rng);
        let p = Parameters {
            config: cfg,
            wte: r(&[5, 4]),
            wpe: r(&[4, 4]),
            layers: vec![LayerParams {
                ln1_gamma: r(&[4]),
                ln1_beta: r(&[4]),
                w_q: r(&[4, 4]),
                w_k: r(&[4, 4]),
                w_v: r(&[4, 4]),
                w_o: r(&[4, 4]),
                ln2_gamma: r(&[4]),
                ln2_beta: r(&[4]),
                w_fc: r(&[4, 8]),
                w_proj: r(&[8, 4]),
            }],
            lnf_gamma: r(&[4]),
            lnf_beta: r(&[4]),
            unembed: r(&[4, 5]),
        };
        let toks = [3usize, 1];

        let vecmat = |x: &[f64], w: &Tensor<f64>| -> Vec<f64> {
            (0..w.cols())
                .map(|j| (0..x.len()).map(|i| x[i] * w.get(i, j)).sum())
                .collect()
        };
        let ln = |x: &[f64], g: &Tensor<f64>, b: &Tensor<f64>| -> Vec<f64> {
            let n = x.len() as f64;
            let mu = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            x.iter()
                .enumerate()
                .map(|(i, v)| (v - mu) / (var + 1e-5).sqrt() * g.data()[i] + b.data()[i])
                .collect()
        };
        let gelu = |x: f64| {
            0.5 * x
                * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
        };
        let add =
            |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x + y).collect() };
        let lp = &p.layers[0];

        let h0: Vec<Vec<f64>> = (0..2)
            .map(|t| add(p.wte.row(toks[t]), p.wpe.row(t)))
            .collect();
        let x1: Vec<Vec<f64>> = h0
            .iter()
            .map(|h| ln(h, &lp.ln1_gamma, &lp.ln1_beta))
            .collect();
        let q: Vec<Vec<f64>> = x1.iter().map(|x| vecmat(x, &lp.w_q)).collect();
        let k: Vec<Vec<f64>> = x1.iter().map(|x| vecmat(x, &lp.w_k)).collect();
        let v: Vec<Vec<f64>> = x1.iter().map(|x| vecmat(x, &lp.w_v)).collect();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        // position 0 attends only to itself
        let z0 = v[0].clone();
        let s00 = dot(&q[1], &k[0]) / 2.0;
        let s01 = dot(&q[1], &k[1]) / 2.0;
        let (e0, e1) = (s00.exp(), s01.exp());
        let (p0, p1) = (e0 / (e0 + e1), e1 / (e0 + e1));
        let z1: Vec<f64> = (0..4).map(|j| p0 * v[0][j] + p1 * v[1][j]).collect();
        let mut logits = Vec::new();
        for (t, z) in [z0, z1].iter().enumerate() {
            let a = vecmat(z, &lp.w_o);
            let mid = add(&h0[t], &a);
            let hid: Vec<f64> = vecmat(&ln(&mid, &lp.ln2_gamma, &lp.ln2_beta), &lp.w_fc)
                .into_iter()
                .map(gelu)
                .collect();
            let m = vecmat(&hid, &lp.w_proj);
            let h1 = add(&mid, &m);
            logits.extend(vecmat(&ln(&h1, &p.lnf_gamma, &p.lnf_beta), &p.unembed));
        }

        let (got, _) = forward(&p, &toks).unwrap();
        for (g, w) in got.data().iter().zip(&logits) {
            assert!((g - w).abs() < 1e-5, "{g} vs {w}");
        }
        let (got32, tape32) = forward(&p.cast::<f32>(), &toks).unwrap();
        for (g, w) in got32.data().iter().zip(&logits) {
            assert!((*g as f64 - w).abs() < 1e-5, "{g} vs {w}");
        }
        assert!(tape32.residual_error() < 1e-5);
    }
}
