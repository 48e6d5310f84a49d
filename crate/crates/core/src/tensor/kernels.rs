// SPDX-License-Identifier: MIT OR Apache-2.0

//! Row kernels shared by eager tensors and the tape.

use crate::scalar::Scalar;

/// Variance guard for layer normalization.
pub const LAYERNORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU (the GPT-2 form).
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

pub fn logsumexp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    let inv = T::one() / s;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Returns `(mean, 1/sqrt(var + eps))` of a row.
pub fn row_moments<T: Scalar>(row: &[T]) -> (T, T) {
    let n = T::lit(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + T::lit(LAYERNORM_EPS)).sqrt())
}

/// Normalizes `row` in place and applies the affine.
pub fn layernorm_row<T: Scalar>(row: &mut [T], gamma: &[T], beta: &[T]) {
    let (mean, rstd) = row_moments(row);
    for ((v, &g), &b) in row.iter_mut().zip(gamma).zip(beta) {
        *v = (*v - mean) * rstd * g + b;
    }
}

/// Backward of one layernorm row. Accumulates into `dx`, `dgamma`, `dbeta`.
#[allow(clippy::too_many_arguments)]
pub fn layernorm_row_backward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    dy: &[T],
    dx: &mut [T],
    dgamma: Option<&mut [T]>,
    dbeta: Option<&mut [T]>,
) {
    let n = x.len();
    let nf = T::lit(n as f64);
    let (mean, rstd) = row_moments(x);
    let mut sum_dxhat = T::zero();
    let mut sum_dxhat_xhat = T::zero();
    for i in 0..n {
        let xhat = (x[i] - mean) * rstd;
        let dxhat = dy[i] * gamma[i];
        sum_dxhat += dxhat;
        sum_dxhat_xhat += dxhat * xhat;
    }
    let m1 = sum_dxhat / nf;
    let m2 = sum_dxhat_xhat / nf;
    for i in 0..n {
        let xhat = (x[i] - mean) * rstd;
        let dxhat = dy[i] * gamma[i];
        dx[i] += rstd * (dxhat - m1 - xhat * m2);
    }
    if let Some(dg) = dgamma {
        for i in 0..n {
            dg[i] += dy[i] * (x[i] - mean) * rstd;
        }
    }
    if let Some(db) = dbeta {
        for i in 0..n {
            db[i] += dy[i];
        }
    }
}

/// A contiguous run of rows holding one sequence in a packed batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn last_row(&self) -> usize {
        self.start + self.len - 1
    }
}

/// Segments for a batch of sequences laid out back to back.
pub fn pack_segments(lengths: impl IntoIterator<Item = usize>) -> Vec<Segment> {
    let mut start = 0;
    lengths
        .into_iter()
        .map(|len| {
            let s = Segment { start, len };
            start += len;
            s
        })
        .collect()
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Causal multi-head attention over packed sequences.
///
/// `q`, `k`, `v` and `out` are `rows × width`. When `probs` is given, the
/// attention weights are appended to it segment by segment, head by head,
/// as `len × len` blocks (zero above the diagonal).
pub fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    width: usize,
    heads: usize,
    segments: &[Segment],
    out: &mut [T],
    mut probs: Option<&mut Vec<T>>,
) {
    let dh = width / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut scores = Vec::new();
    for seg in segments {
        for h in 0..heads {
            let off = h * dh;
            for t in 0..seg.len {
                let rt = seg.start + t;
                let qt = &q[rt * width + off..rt * width + off + dh];
                scores.clear();
                for u in 0..=t {
                    let ru = seg.start + u;
                    scores.push(dot(qt, &k[ru * width + off..ru * width + off + dh]) * scale);
                }
                softmax_in_place(&mut scores);
                let o = &mut out[rt * width + off..rt * width + off + dh];
                o.iter_mut().for_each(|x| *x = T::zero());
                for (u, &p) in scores.iter().enumerate() {
                    let ru = seg.start + u;
                    let vu = &v[ru * width + off..ru * width + off + dh];
                    for (x, &y) in o.iter_mut().zip(vu) {
                        *x += p * y;
                    }
                }
                if let Some(pr) = probs.as_deref_mut() {
                    pr.extend_from_slice(&scores);
                    pr.extend(std::iter::repeat_n(T::zero(), seg.len - t - 1));
                }
            }
        }
    }
}

/// Backward of [`attention_forward`] given the cached weights.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    width: usize,
    heads: usize,
    segments: &[Segment],
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let dh = width / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut p_off = 0;
    let mut dp = Vec::new();
    for seg in segments {
        for h in 0..heads {
            let off = h * dh;
            for t in 0..seg.len {
                let rt = seg.start + t;
                let p_row = &probs[p_off + t * seg.len..p_off + t * seg.len + t + 1];
                let dot_t = &dout[rt * width + off..rt * width + off + dh];
                dp.clear();
                for u in 0..=t {
                    let ru = seg.start + u;
                    let vu = &v[ru * width + off..ru * width + off + dh];
                    dp.push(dot(dot_t, vu));
                    let dvu = &mut dv[ru * width + off..ru * width + off + dh];
                    for (x, &g) in dvu.iter_mut().zip(dot_t) {
                        *x += p_row[u] * g;
                    }
                }
                let s = p_row
                    .iter()
                    .zip(&dp)
                    .fold(T::zero(), |a, (&p, &g)| a + p * g);
                for u in 0..=t {
                    let ds = p_row[u] * (dp[u] - s) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let ru = seg.start + u;
                    for j in 0..dh {
                        dq[rt * width + off + j] += ds * k[ru * width + off + j];
                        dk[ru * width + off + j] += ds * q[rt * width + off + j];
                    }
                }
            }
            p_off += seg.len * seg.len;
        }
    }
}
