// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pipeline of the knowledge localization lab: world generation, training,
//! causal tracing, editing, evaluation and reporting, each stage reading
//! and writing hash-stamped artifacts in one output directory.

pub mod artifacts;
pub mod config;
pub mod pipeline;
pub mod svg;

pub use artifacts::{exit_code, GateFailure, OutDir, Provenance, Stage, UpstreamError};
pub use config::ExperimentConfig;
pub use pipeline::Lab;
