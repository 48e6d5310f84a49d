// SPDX-License-Identifier: MIT OR Apache-2.0

use thiserror::Error;

use crate::model::Parameters;

/// Errors raised anywhere in the lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("graph error: {0}")]
    Graph(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("vocabulary error: token {token} >= vocabulary size {vocab}")]
    Vocabulary { token: usize, vocab: usize },
    #[error("intervention error: {0}")]
    Intervention(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("template error: {0}")]
    Template(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("training diverged at step {step}: non-finite loss")]
    Divergence {
        step: usize,
        /// Parameters before the step that produced the non-finite loss.
        last_good: Box<Parameters<f32>>,
    },
    #[error("spec error: {0}")]
    Spec(String),
    #[error("span error: {0}")]
    Span(String),
    #[error("optimization stalled: {0}")]
    OptimizationStall(String),
    #[error("conditioning error: {0}")]
    Conditioning(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("report error: {0}")]
    Report(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("recall gate: {0}")]
    RecallGate(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
