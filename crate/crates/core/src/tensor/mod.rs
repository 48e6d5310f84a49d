// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense row-major tensors, eager kernels, and a reverse-mode tape.
//!
//! [`Tensor`] is an immutable-by-convention value: every op returns a new
//! tensor. The same row kernels back both the eager ops here and the
//! differentiable ops recorded on a [`Tape`].

pub mod kernels;
pub mod optim;
pub mod tape;

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use optim::{Adam, AdamConfig, Sgd};
pub use tape::{Gradients, Tape, Var};

/// Elementwise / row-wise operation selector for [`Tensor::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Gelu,
    LayerNorm,
    SoftmaxRows,
    Log,
    Neg,
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(6).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "shape must be non-empty positive integers, got {shape:?}"
            )));
        }
        if numel(&shape) != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel(shape)],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn vector(data: Vec<T>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z * std)
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix (leading dims collapsed).
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    /// Size of the trailing dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite value in {what}")))
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64_lossy()).unwrap_or_else(U::nan))
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let c = self.cols();
        let n = self.rows();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= n {
                return Err(Error::Index(format!("row {r} out of {n}")));
            }
            data.extend_from_slice(self.row(r));
        }
        Self::new(vec![rows.len(), c], data)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.matrix_dims("transpose")?;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self::new(vec![n, m], out)
    }

    fn matrix_dims(&self, op: &str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            [n] => Ok((1, *n)),
            s => Err(Error::Dimension(format!(
                "{op} expects a matrix, got {s:?}"
            ))),
        }
    }

    /// Standard matrix product `self[m×k] · other[k×n]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.matrix_dims("matmul")?;
        let (k2, n) = other.matrix_dims("matmul")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions disagree: {:?} · {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &self.data,
            k,
            1,
            &other.data,
            n,
            1,
            T::zero(),
            &mut out,
            n,
            1,
        );
        Self::new(vec![m, n], out)
    }

    /// `self[m×k] · other[n×k]ᵀ`.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.matrix_dims("matmul_t")?;
        let (n, k2) = other.matrix_dims("matmul_t")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul_t inner dimensions disagree: {:?} · {:?}ᵀ",
                self.shape, other.shape
            )));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &self.data,
            k,
            1,
            &other.data,
            1,
            k,
            T::zero(),
            &mut out,
            n,
            1,
        );
        Self::new(vec![m, n], out)
    }

    fn broadcast_binary(&self, other: &Self, op: &str, f: impl Fn(T, T) -> T) -> Result<Self> {
        let out = if self.shape == other.shape {
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect()
        } else if other.data.len() == 1 {
            let b = other.data[0];
            self.data.iter().map(|&a| f(a, b)).collect()
        } else if other.data.len() == self.cols() && other.cols() == self.cols() {
            let c = self.cols();
            self.data
                .iter()
                .enumerate()
                .map(|(i, &a)| f(a, other.data[i % c]))
                .collect()
        } else {
            return Err(Error::Dimension(format!(
                "{op}: shapes {:?} and {:?} do not broadcast",
                self.shape, other.shape
            )));
        };
        Self::new(self.shape.clone(), out)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.broadcast_binary(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.broadcast_binary(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.broadcast_binary(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn neg(&self) -> Self {
        self.map(|v| -v)
    }

    pub fn log(&self) -> Result<Self> {
        self.ensure_finite("log input")?;
        let out = self.map(|v| v.ln());
        out.ensure_finite("log output")?;
        Ok(out)
    }

    pub fn gelu(&self) -> Result<Self> {
        self.ensure_finite("gelu input")?;
        Ok(self.map(kernels::gelu))
    }

    pub fn softmax_rows(&self) -> Result<Self> {
        self.ensure_finite("softmax input")?;
        let mut out = self.clone();
        let c = self.cols();
        for row in out.data.chunks_mut(c) {
            kernels::softmax_in_place(row);
        }
        Ok(out)
    }

    /// Row-wise layer normalization followed by the `gamma`/`beta` affine.
    pub fn layernorm(&self, gamma: &Self, beta: &Self) -> Result<Self> {
        self.ensure_finite("layernorm input")?;
        let c = self.cols();
        if gamma.len() != c || beta.len() != c {
            return Err(Error::Dimension(format!(
                "layernorm affine width {}/{} != {c}",
                gamma.len(),
                beta.len()
            )));
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(c) {
            kernels::layernorm_row(row, &gamma.data, &beta.data);
        }
        Ok(out)
    }

    /// Dispatches the named elementwise/row-wise op. Binary ops read
    /// `operands[0]`; `LayerNorm` reads `(gamma, beta)` from `operands`.
    pub fn elementwise(&self, op: Elementwise, operands: &[&Self]) -> Result<Self> {
        let arg = |i: usize| {
            operands
                .get(i)
                .copied()
                .ok_or_else(|| Error::Dimension(format!("{op:?} needs operand {i}")))
        };
        match op {
            Elementwise::Add => self.add(arg(0)?),
            Elementwise::Mul => self.mul(arg(0)?),
            Elementwise::Gelu => self.gelu(),
            Elementwise::LayerNorm => self.layernorm(arg(0)?, arg(1)?),
            Elementwise::SoftmaxRows => self.softmax_rows(),
            Elementwise::Log => self.log(),
            Elementwise::Neg => Ok(self.neg()),
        }
    }

    /// Mean over rows of `-log softmax(row)[target]`.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<T> {
        self.ensure_finite("cross_entropy logits")?;
        let v = self.cols();
        if targets.len() != self.rows() {
            return Err(Error::Dimension(format!(
                "{} targets for {} rows",
                targets.len(),
                self.rows()
            )));
        }
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::Index(format!("target {t} >= vocabulary {v}")));
            }
            let row = self.row(r);
            total += kernels::logsumexp(row) - row[t];
        }
        Ok(total / T::lit(targets.len() as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(rows: &[&[f32]]) -> Tensor<f32> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Tensor::<f32>::randn(&[3, 3], 1.0, &mut rng);
        assert_eq!(Tensor::eye(3).matmul(&m).unwrap(), m);
    }

    #[test]
    fn hand_matmul() {
        let a = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = t(&[&[0.0], &[1.0]]);
        assert_eq!(a.matmul(&b).unwrap(), t(&[&[2.0], &[4.0]]));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::Dimension(_))));
    }

    #[test]
    fn matmul_t_agrees_with_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::<f64>::randn(&[4, 5], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[3, 5], 1.0, &mut rng);
        let direct = a.matmul(&b.transpose().unwrap()).unwrap();
        assert!(a.matmul_t(&b).unwrap().max_abs_diff(&direct) < 1e-12);
    }

    #[test]
    fn softmax_uniform_row() {
        let s = t(&[&[0.0, 0.0, 0.0]]).softmax_rows().unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn layernorm_constant_row_is_zero() {
        let x = t(&[&[2.5, 2.5, 2.5, 2.5]]);
        let g = Tensor::full(&[4], 1.0);
        let b = Tensor::zeros(&[4]);
        let y = x.layernorm(&g, &b).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn cross_entropy_cases() {
        let mut sat = vec![0.0f32; 5];
        sat[2] = 1e4;
        let l = Tensor::from_rows(&[sat])
            .unwrap()
            .cross_entropy(&[2])
            .unwrap();
        assert!(l.abs() < 1e-6);
        let uni = Tensor::<f32>::zeros(&[1, 8]);
        assert!((uni.cross_entropy(&[3]).unwrap() - 8f32.ln()).abs() < 1e-6);
        assert!(matches!(uni.cross_entropy(&[8]), Err(Error::Index(_))));
    }

    #[test]
    fn non_finite_inputs_rejected() {
        let x = t(&[&[f32::NAN, 1.0]]);
        assert!(matches!(x.gelu(), Err(Error::Numeric(_))));
        assert!(matches!(x.softmax_rows(), Err(Error::Numeric(_))));
        assert!(matches!(x.log(), Err(Error::Numeric(_))));
    }

    #[test]
    fn broadcast_row_bias() {
        let x = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Tensor::vector(vec![10.0, 20.0]).unwrap();
        assert_eq!(x.add(&b).unwrap(), t(&[&[11.0, 22.0], &[13.0, 24.0]]));
        assert!(x.add(&Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn constructor_checks_shape() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![0, 2], vec![]).is_err());
    }
}
