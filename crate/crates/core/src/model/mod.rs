// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoder-only pre-layernorm transformer.
//!
//! Each block computes
//!
//! ```text
//! a = attn(LN1(h_prev))            causal, over all prior positions
//! m = W_proj · gelu(W_fc · LN2(h_prev + a))
//! h = h_prev + a + m
//! ```
//!
//! The eager path ([`forward`], [`forward_intervened`]) records every
//! embedding, attention output, MLP output and hidden state, and can patch
//! any of them. The taped path ([`taped`]) builds the same computation on a
//! [`Tape`](crate::tensor::Tape) for training and value optimization.

pub mod checkpoint;
mod forward;
pub mod taped;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use forward::{
    answer_probability, argmax, final_logits, forward, forward_intervened, last_logits, Action,
    ActivationTape, Intervention, Site,
};
pub(crate) use forward::{run_blocks, SiteHook};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl ModelConfig {
    /// Default toy shape; the vocabulary size comes from the world.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            n_layers: 8,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            vocab_size,
            max_len: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 {
            return bad("model needs at least one layer".into());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "{} heads must divide width {}",
                self.n_heads, self.d_model
            ));
        }
        if self.vocab_size < 2 {
            return bad(format!("vocabulary size {} < 2", self.vocab_size));
        }
        if self.d_ff == 0 || self.max_len == 0 {
            return bad("d_ff and max_len must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T: Scalar = f32> {
    pub ln1_gamma: Tensor<T>,
    pub ln1_beta: Tensor<T>,
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub ln2_gamma: Tensor<T>,
    pub ln2_beta: Tensor<T>,
    /// `[d_model × d_ff]`
    pub w_fc: Tensor<T>,
    /// `[d_ff × d_model]`; its input is the MLP key vector.
    pub w_proj: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T: Scalar = f32> {
    pub config: ModelConfig,
    /// `[vocab × d_model]`
    pub wte: Tensor<T>,
    /// `[max_len × d_model]`
    pub wpe: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub lnf_gamma: Tensor<T>,
    pub lnf_beta: Tensor<T>,
    /// `[d_model × vocab]`
    pub unembed: Tensor<T>,
}

const LAYER_NAMES: [&str; 10] = [
    "ln1.gamma",
    "ln1.beta",
    "attn.w_q",
    "attn.w_k",
    "attn.w_v",
    "attn.w_o",
    "ln2.gamma",
    "ln2.beta",
    "mlp.w_fc",
    "mlp.w_proj",
];

impl<T: Scalar> LayerParams<T> {
    fn tensors(&self) -> [&Tensor<T>; 10] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.w_fc,
            &self.w_proj,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 10] {
        [
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.w_fc,
            &mut self.w_proj,
        ]
    }
}

impl<T: Scalar> Parameters<T> {
    /// GPT-2 style initialization: N(0, 0.02) weights, residual-output
    /// projections scaled by `1/sqrt(2L)`, unit layernorm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let std = 0.02;
        let resid_std = std / ((2 * config.n_layers) as f64).sqrt();
        let ones = || Tensor::full(&[d], T::one());
        let zeros = || Tensor::zeros(&[d]);
        let wte = Tensor::randn(&[v, d], std, &mut rng);
        let wpe = Tensor::randn(&[config.max_len, d], std / 2.0, &mut rng);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_gamma: ones(),
                ln1_beta: zeros(),
                w_q: Tensor::randn(&[d, d], std, &mut rng),
                w_k: Tensor::randn(&[d, d], std, &mut rng),
                w_v: Tensor::randn(&[d, d], std, &mut rng),
                w_o: Tensor::randn(&[d, d], resid_std, &mut rng),
                ln2_gamma: ones(),
                ln2_beta: zeros(),
                w_fc: Tensor::randn(&[d, f], std, &mut rng),
                w_proj: Tensor::randn(&[f, d], resid_std, &mut rng),
            })
            .collect();
        Ok(Self {
            config,
            wte,
            wpe,
            layers,
            lnf_gamma: ones(),
            lnf_beta: zeros(),
            unembed: Tensor::randn(&[d, v], std, &mut rng),
        })
    }

    /// Every tensor with its checkpoint name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("wte".to_string(), &self.wte),
            ("wpe".to_string(), &self.wpe),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_NAMES.iter().zip(layer.tensors()) {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        out.push(("ln_f.gamma".into(), &self.lnf_gamma));
        out.push(("ln_f.beta".into(), &self.lnf_beta));
        out.push(("unembed".into(), &self.unembed));
        out
    }

    /// Mutable view in the same order as [`Parameters::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.wte, &mut self.wpe];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.lnf_gamma);
        out.push(&mut self.lnf_beta);
        out.push(&mut self.unembed);
        out
    }

    pub fn expected_shape(config: &ModelConfig, name: &str) -> Option<Vec<usize>> {
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let shape = match name {
            "wte" => vec![v, d],
            "wpe" => vec![config.max_len, d],
            "ln_f.gamma" | "ln_f.beta" => vec![d],
            "unembed" => vec![d, v],
            other => {
                let rest = other.strip_prefix("layers.")?;
                let (idx, field) = rest.split_once('.')?;
                if idx.parse::<usize>().ok()? >= config.n_layers {
                    return None;
                }
                match field {
                    "ln1.gamma" | "ln1.beta" | "ln2.gamma" | "ln2.beta" => vec![d],
                    "attn.w_q" | "attn.w_k" | "attn.w_v" | "attn.w_o" => vec![d, d],
                    "mlp.w_fc" => vec![d, f],
                    "mlp.w_proj" => vec![f, d],
                    _ => return None,
                }
            }
        };
        Some(shape)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.layers.len() != self.config.n_layers {
            return Err(Error::Config(format!(
                "{} layers present, config says {}",
                self.layers.len(),
                self.config.n_layers
            )));
        }
        for (name, t) in self.named_tensors() {
            let want = Self::expected_shape(&self.config, &name)
                .ok_or_else(|| Error::Config(format!("unexpected tensor {name}")))?;
            if t.shape() != want.as_slice() {
                return Err(Error::Dimension(format!(
                    "{name} has shape {:?}, expected {want:?}",
                    t.shape()
                )));
            }
            t.ensure_finite(&name)?;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        Parameters {
            config: self.config,
            wte: self.wte.cast(),
            wpe: self.wpe.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_gamma: l.ln1_gamma.cast(),
                    ln1_beta: l.ln1_beta.cast(),
                    w_q: l.w_q.cast(),
                    w_k: l.w_k.cast(),
                    w_v: l.w_v.cast(),
                    w_o: l.w_o.cast(),
                    ln2_gamma: l.ln2_gamma.cast(),
                    ln2_beta: l.ln2_beta.cast(),
                    w_fc: l.w_fc.cast(),
                    w_proj: l.w_proj.cast(),
                })
                .collect(),
            lnf_gamma: self.lnf_gamma.cast(),
            lnf_beta: self.lnf_beta.cast(),
            unembed: self.unembed.cast(),
        }
    }

    /// Names of tensors whose bits differ between two models.
    pub fn diff_names(&self, other: &Self) -> Vec<String> {
        self.named_tensors()
            .into_iter()
            .zip(other.named_tensors())
            .filter(|((_, a), (_, b))| {
                a.data()
                    .iter()
                    .zip(b.data())
                    .any(|(x, y)| x.to_f64_lossy().to_bits() != y.to_f64_lossy().to_bits())
            })
            .map(|((n, _), _)| n)
            .collect()
    }

    /// Standard deviation of all token-embedding entries.
    pub fn embedding_std(&self) -> f64 {
        let n = self.wte.len() as f64;
        let mean = self
            .wte
            .data()
            .iter()
            .map(|v| v.to_f64_lossy())
            .sum::<f64>()
            / n;
        let var = self
            .wte
            .data()
            .iter()
            .map(|v| (v.to_f64_lossy() - mean).powi(2))
            .sum::<f64>()
            / n;
        var.sqrt()
    }
}
