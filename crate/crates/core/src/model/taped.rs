// SPDX-License-Identifier: MIT OR Apache-2.0

//! The forward pass recorded on a [`Tape`] for differentiation.

use std::ops::Range;

use super::Parameters;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::kernels::Segment;
use crate::tensor::{Tape, Var};

pub struct LayerVars<'t, T: Scalar> {
    pub ln1_gamma: Var<'t, T>,
    pub ln1_beta: Var<'t, T>,
    pub w_q: Var<'t, T>,
    pub w_k: Var<'t, T>,
    pub w_v: Var<'t, T>,
    pub w_o: Var<'t, T>,
    pub ln2_gamma: Var<'t, T>,
    pub ln2_beta: Var<'t, T>,
    pub w_fc: Var<'t, T>,
    pub w_proj: Var<'t, T>,
}

/// Model parameters placed on a tape, in checkpoint order.
pub struct ParamVars<'t, T: Scalar> {
    pub n_heads: usize,
    pub wte: Var<'t, T>,
    pub wpe: Var<'t, T>,
    pub layers: Vec<LayerVars<'t, T>>,
    pub lnf_gamma: Var<'t, T>,
    pub lnf_beta: Var<'t, T>,
    pub unembed: Var<'t, T>,
}

impl<'t, T: Scalar> ParamVars<'t, T> {
    /// Records every tensor; those whose name satisfies `trainable` become
    /// differentiable leaves, the rest constants.
    pub fn new(
        tape: &'t Tape<T>,
        params: &Parameters<T>,
        trainable: impl Fn(&str) -> bool,
    ) -> Self {
        let mut vars = params.named_tensors().into_iter().map(|(name, t)| {
            if trainable(&name) {
                tape.var(t.clone())
            } else {
                tape.constant(t.clone())
            }
        });
        let mut next = || vars.next().expect("named_tensors covers every field");
        let wte = next();
        let wpe = next();
        let layers = (0..params.config.n_layers)
            .map(|_| LayerVars {
                ln1_gamma: next(),
                ln1_beta: next(),
                w_q: next(),
                w_k: next(),
                w_v: next(),
                w_o: next(),
                ln2_gamma: next(),
                ln2_beta: next(),
                w_fc: next(),
                w_proj: next(),
            })
            .collect();
        Self {
            n_heads: params.config.n_heads,
            wte,
            wpe,
            layers,
            lnf_gamma: next(),
            lnf_beta: next(),
            unembed: next(),
        }
    }

    /// Every variable, in the order of [`Parameters::named_tensors`].
    pub fn all(&self) -> Vec<Var<'t, T>> {
        let mut out = vec![self.wte, self.wpe];
        for l in &self.layers {
            out.extend([
                l.ln1_gamma,
                l.ln1_beta,
                l.w_q,
                l.w_k,
                l.w_v,
                l.w_o,
                l.ln2_gamma,
                l.ln2_beta,
                l.w_fc,
                l.w_proj,
            ]);
        }
        out.extend([self.lnf_gamma, self.lnf_beta, self.unembed]);
        out
    }

    /// Token plus position embeddings of packed sequences.
    pub fn embed(&self, tokens: &[usize], segments: &[Segment]) -> Result<Var<'t, T>> {
        let positions: Vec<usize> = segments.iter().flat_map(|s| 0..s.len).collect();
        if positions.len() != tokens.len() {
            return Err(Error::Dimension(format!(
                "segments cover {} rows, {} tokens given",
                positions.len(),
                tokens.len()
            )));
        }
        self.wte
            .gather_rows(tokens)?
            .add(&self.wpe.gather_rows(&positions)?)
    }

    /// Blocks `layers` applied to packed hidden rows `h`.
    pub fn blocks(
        &self,
        mut h: Var<'t, T>,
        segments: &[Segment],
        layers: Range<usize>,
    ) -> Result<Var<'t, T>> {
        for l in layers {
            let p = &self.layers[l];
            let x1 = h.layernorm(&p.ln1_gamma, &p.ln1_beta)?;
            let q = x1.matmul(&p.w_q)?;
            let k = x1.matmul(&p.w_k)?;
            let v = x1.matmul(&p.w_v)?;
            let a = q
                .attention(&k, &v, self.n_heads, segments)?
                .matmul(&p.w_o)?;
            let mid = h.add(&a)?;
            let m = mid
                .layernorm(&p.ln2_gamma, &p.ln2_beta)?
                .matmul(&p.w_fc)?
                .gelu()?
                .matmul(&p.w_proj)?;
            h = mid.add(&m)?;
        }
        Ok(h)
    }

    /// Logits at the given rows of the final hidden state.
    pub fn logits_at(&self, h: Var<'t, T>, rows: &[usize]) -> Result<Var<'t, T>> {
        h.gather_rows(rows)?
            .layernorm(&self.lnf_gamma, &self.lnf_beta)?
            .matmul(&self.unembed)
    }

    /// Mean cross-entropy of `answers` predicted at the last row of each
    /// segment.
    pub fn answer_loss(
        &self,
        h: Var<'t, T>,
        segments: &[Segment],
        answers: &[usize],
    ) -> Result<Var<'t, T>> {
        if answers.len() != segments.len() {
            return Err(Error::Dimension(format!(
                "{} answers for {} sequences",
                answers.len(),
                segments.len()
            )));
        }
        let last: Vec<usize> = segments.iter().map(Segment::last_row).collect();
        self.logits_at(h, &last)?.cross_entropy(answers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, ModelConfig};
    use crate::tensor::kernels::pack_segments;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 9,
            max_len: 6,
        }
    }

    #[test]
    fn taped_matches_eager_on_packed_batch() {
        let p = Parameters::<f64>::init(cfg(), 7).unwrap();
        let seqs = [vec![1usize, 4, 2], vec![3, 3, 8, 5, 1], vec![6]];
        let tokens: Vec<usize> = seqs.iter().flatten().copied().collect();
        let segs = pack_segments(seqs.iter().map(Vec::len));
        let tape = Tape::new();
        let pv = ParamVars::new(&tape, &p, |_| false);
        let h = pv
            .blocks(pv.embed(&tokens, &segs).unwrap(), &segs, 0..2)
            .unwrap();
        let last: Vec<usize> = segs.iter().map(Segment::last_row).collect();
        let logits = pv.logits_at(h, &last).unwrap().value();
        for (i, s) in seqs.iter().enumerate() {
            let (eager, _) = forward(&p, s).unwrap();
            let want = eager.row(s.len() - 1);
            for (a, b) in logits.row(i).iter().zip(want) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn answer_loss_gradient_matches_difference() {
        let p = Parameters::<f64>::init(cfg(), 8).unwrap();
        let seqs = [vec![1usize, 4, 2], vec![3, 8]];
        let answers = [5usize, 7];
        let tokens: Vec<usize> = seqs.iter().flatten().copied().collect();
        let segs = pack_segments(seqs.iter().map(Vec::len));
        let loss_of = |p: &Parameters<f64>| {
            let tape = Tape::new();
            let pv = ParamVars::new(&tape, p, |_| false);
            let h = pv
                .blocks(pv.embed(&tokens, &segs).unwrap(), &segs, 0..2)
                .unwrap();
            pv.answer_loss(h, &segs, &answers).unwrap().value().item()
        };
        let tape = Tape::new();
        let pv = ParamVars::new(&tape, &p, |n| n.contains("w_fc") || n == "wte");
        let h = pv
            .blocks(pv.embed(&tokens, &segs).unwrap(), &segs, 0..2)
            .unwrap();
        let loss = pv.answer_loss(h, &segs, &answers).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let g = grads.wrt(&pv.layers[1].w_fc);
        for idx in [0usize, 17, 63, 100] {
            let mut hi = p.clone();
            let mut lo = p.clone();
            hi.layers[1].w_fc.data_mut()[idx] += 1e-6;
            lo.layers[1].w_fc.data_mut()[idx] -= 1e-6;
            let fd = (loss_of(&hi) - loss_of(&lo)) / 2e-6;
            assert!(
                (fd - g.data()[idx]).abs() < 1e-7,
                "{fd} vs {}",
                g.data()[idx]
            );
        }
        assert!(grads.get(&pv.layers[0].w_q).is_none());
    }
}
