// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod edit;
pub mod error;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod trace;
pub mod train;
pub mod world;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision tensor, the working type of training and tracing.
pub type Tensor32 = tensor::Tensor<f32>;
/// Double-precision tensor, used for gradient and solver checks.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Params32 = model::Parameters<f32>;
pub type Params64 = model::Parameters<f64>;
pub type Tape32 = tensor::Tape<f32>;
pub type Tape64 = tensor::Tape<f64>;
pub type ActivationTape32 = model::ActivationTape<f32>;
