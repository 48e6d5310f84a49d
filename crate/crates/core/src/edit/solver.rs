// SPDX-License-Identifier: MIT OR Apache-2.0

//! Closed-form key/value least squares for one weight matrix.
//!
//! `W` maps row keys to row values: `value = key · W`, with `W` of shape
//! `[d_key × d_out]`. Keys and values are stacked as rows of `K` (`m × d_key`)
//! and `V` (`m × d_out`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Regularization target of the ridge term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    /// Minimize `‖K Ŵ − V‖² + λ‖Ŵ − W‖²`; directions outside the keys keep `W`.
    Anchored,
    /// Minimize `‖K Ŵ − V‖² + λ‖Ŵ‖²`, the minimum-norm ridge solution.
    MinNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub lambda: f64,
    /// Relative residual `‖k Ŵ − v‖ / ‖v‖` per row, in input order.
    pub residuals: Vec<f64>,
    pub max_preserved_residual: f64,
    pub max_update_residual: f64,
    /// Ratio of largest to smallest Cholesky pivot squared.
    pub condition_estimate: f64,
}

/// Default ridge strength: `1e-2 ×` mean squared key norm.
pub fn default_lambda<T: Scalar>(keys: &Tensor<T>) -> f64 {
    let m = keys.rows().max(1) as f64;
    1e-2 * keys
        .data()
        .iter()
        .map(|v| v.to_f64_lossy().powi(2))
        .sum::<f64>()
        / m
}

const MAX_CONDITION: f64 = 1e12;

/// Lower-triangular Cholesky factor of a symmetric positive definite
/// row-major `n × n` matrix.
pub(crate) fn cholesky(a: &[f64], n: usize) -> Result<(Vec<f64>, f64)> {
    let mut l = vec![0.0; n * n];
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return Err(Error::Conditioning(format!(
                        "Gram matrix is not positive definite at pivot {i} ({s:e})"
                    )));
                }
                lo = lo.min(s);
                hi = hi.max(s);
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok((l, hi / lo))
}

/// Solves `L Lᵀ x = b` in place for each column of the row-major `n × c` `b`.
pub(crate) fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64], c: usize) {
    for col in 0..c {
        for i in 0..n {
            let mut s = b[i * c + col];
            for k in 0..i {
                s -= l[i * n + k] * b[k * c + col];
            }
            b[i * c + col] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = b[i * c + col];
            for k in i + 1..n {
                s -= l[k * n + i] * b[k * c + col];
            }
            b[i * c + col] = s / l[i * n + i];
        }
    }
}

fn to_f64<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.to_f64_lossy()).collect()
}

/// Solves for `Ŵ` given the first `n_preserved` rows as retention pairs and
/// the rest as updates, through the `m × m` dual system
/// `(K Kᵀ + λI) A = V − K W₀`, `Ŵ = W₀ + Kᵀ A` (with `W₀ = 0` for
/// [`SolverKind::MinNorm`]).
pub fn solve_weight_update<T: Scalar>(
    w: &Tensor<T>,
    keys: &Tensor<T>,
    values: &Tensor<T>,
    n_preserved: usize,
    lambda: f64,
    kind: SolverKind,
) -> Result<(Tensor<T>, SolveDiagnostics)> {
    let (dk, dv) = (w.rows(), w.cols());
    let m = keys.rows();
    if keys.cols() != dk || values.cols() != dv || values.rows() != m {
        return Err(Error::Dimension(format!(
            "keys {:?} / values {:?} do not match weight {:?}",
            keys.shape(),
            values.shape(),
            w.shape()
        )));
    }
    if n_preserved > m {
        return Err(Error::Dimension(format!(
            "{n_preserved} preserved rows of {m}"
        )));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!(
            "ridge λ = {lambda} must be positive"
        )));
    }
    if m == 0 {
        let diag = SolveDiagnostics {
            lambda,
            residuals: Vec::new(),
            max_preserved_residual: 0.0,
            max_update_residual: 0.0,
            condition_estimate: 1.0,
        };
        let out = match kind {
            SolverKind::Anchored => w.clone(),
            SolverKind::MinNorm => Tensor::zeros(w.shape()),
        };
        return Ok((out, diag));
    }
    keys.ensure_finite("keys")?;
    values.ensure_finite("values")?;

    let k = to_f64(keys);
    let v = to_f64(values);
    let w0 = match kind {
        SolverKind::Anchored => to_f64(w),
        SolverKind::MinNorm => vec![0.0; dk * dv],
    };
    let mut gram = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..=i {
            let s: f64 = (0..dk).map(|c| k[i * dk + c] * k[j * dk + c]).sum();
            gram[i * m + j] = s;
            gram[j * m + i] = s;
        }
        gram[i * m + i] += lambda;
    }
    let (l, condition_estimate) = cholesky(&gram, m)?;
    if condition_estimate > MAX_CONDITION {
        return Err(Error::Conditioning(format!(
            "Gram condition estimate {condition_estimate:e} beyond what λ = {lambda:e} can rescue"
        )));
    }
    // rhs = V − K W₀
    let mut rhs = v.clone();
    for i in 0..m {
        for c in 0..dk {
            let kc = k[i * dk + c];
            if kc != 0.0 {
                for j in 0..dv {
                    rhs[i * dv + j] -= kc * w0[c * dv + j];
                }
            }
        }
    }
    cholesky_solve(&l, m, &mut rhs, dv);
    let mut out = w0;
    for i in 0..m {
        for c in 0..dk {
            let kc = k[i * dk + c];
            for j in 0..dv {
                out[c * dv + j] += kc * rhs[i * dv + j];
            }
        }
    }

    let residuals: Vec<f64> = (0..m)
        .map(|i| {
            let mut err = 0.0;
            let mut norm = 0.0;
            for j in 0..dv {
                let pred: f64 = (0..dk).map(|c| k[i * dk + c] * out[c * dv + j]).sum();
                err += (pred - v[i * dv + j]).powi(2);
                norm += v[i * dv + j].powi(2);
            }
            err.sqrt() / norm.sqrt().max(1e-12)
        })
        .collect();
    let max_of = |r: &[f64]| r.iter().copied().fold(0.0, f64::max);
    let diag = SolveDiagnostics {
        lambda,
        max_preserved_residual: max_of(&residuals[..n_preserved]),
        max_update_residual: max_of(&residuals[n_preserved..]),
        residuals,
        condition_estimate,
    };
    let data = out.into_iter().map(T::lit).collect();
    Ok((Tensor::new(vec![dk, dv], data)?, diag))
}

/// Value of the objective minimized by `kind` at `candidate`.
pub fn objective<T: Scalar>(
    candidate: &Tensor<T>,
    w: &Tensor<T>,
    keys: &Tensor<T>,
    values: &Tensor<T>,
    lambda: f64,
    kind: SolverKind,
) -> Result<f64> {
    let pred = keys.matmul(candidate)?;
    let fit: f64 = pred
        .data()
        .iter()
        .zip(values.data())
        .map(|(p, v)| (p.to_f64_lossy() - v.to_f64_lossy()).powi(2))
        .sum();
    let reg: f64 = candidate
        .data()
        .iter()
        .zip(w.data())
        .map(|(c, w0)| {
            let anchor = match kind {
                SolverKind::Anchored => w0.to_f64_lossy(),
                SolverKind::MinNorm => 0.0,
            };
            (c.to_f64_lossy() - anchor).powi(2)
        })
        .sum();
    Ok(fit + lambda * reg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_of_known_matrix() {
        let a = [4.0, 2.0, 2.0, 3.0];
        let (l, _) = cholesky(&a, 2).unwrap();
        assert!((l[0] - 2.0).abs() < 1e-12);
        assert!((l[2] - 1.0).abs() < 1e-12);
        assert!((l[3] - 2f64.sqrt()).abs() < 1e-12);
        let mut b = [1.0, 2.0];
        cholesky_solve(&l, 2, &mut b, 1);
        // [4 2; 2 3] x = [1 2] → x = [-0.125, 0.75]
        assert!((b[0] + 0.125).abs() < 1e-12 && (b[1] - 0.75).abs() < 1e-12);
        assert!(matches!(
            cholesky(&[1.0, 2.0, 2.0, 1.0], 2),
            Err(Error::Conditioning(_))
        ));
    }

    #[test]
    fn empty_system_keeps_weight() {
        let w = Tensor::<f64>::eye(3);
        let (out, _) = solve_weight_update(
            &w,
            &Tensor::zeros(&[0, 3]),
            &Tensor::zeros(&[0, 3]),
            0,
            1.0,
            SolverKind::Anchored,
        )
        .unwrap();
        assert_eq!(out, w);
    }
}
