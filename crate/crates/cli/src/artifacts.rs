// SPDX-License-Identifier: MIT OR Apache-2.0

//! File names, provenance stamps and freshness checks for stage outputs.

use std::fmt;
use std::path::PathBuf;

use anyhow::{anyhow, Context, Result};
use kloc::model::checkpoint;
use kloc::model::{ModelConfig, Parameters};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const WORLD: &str = "world.json";
pub const MODEL: &str = "model.kloc";
pub const TRAIN_REPORT: &str = "train_report.json";
pub const TRACE_CSV: &str = "trace.csv";
pub const AIE: &str = "aie.json";
pub const SEVER_CSV: &str = "sever.csv";
pub const SEVER: &str = "sever.json";
pub const EDIT_TRACE: &str = "edit_trace.json";
pub const EDITS: &str = "edits.kloc";
pub const METRICS: &str = "metrics_report.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const SUMMARY: &str = "summary.json";

/// Pipeline stages in dependency order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenWorld,
    Train,
    Trace,
    SeverTrace,
    Edit,
    Eval,
    Report,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::GenWorld => "gen-world",
            Stage::Train => "train",
            Stage::Trace => "trace",
            Stage::SeverTrace => "sever-trace",
            Stage::Edit => "edit",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Stamp carried by every artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: Stage,
    pub seed: u64,
    pub config_hash: String,
    /// SHA-256 of the base checkpoint the artifact was computed from;
    /// `None` for artifacts produced before training.
    pub checkpoint_hash: Option<String>,
}

impl Provenance {
    pub fn csv_prefix(&self) -> String {
        format!(
            "{},{},{},{}",
            self.stage,
            self.seed,
            self.config_hash,
            self.checkpoint_hash.as_deref().unwrap_or("")
        )
    }
}

pub const CSV_PROVENANCE_HEADER: &str = "stage,seed,config_hash,checkpoint_hash";

/// A JSON artifact: its provenance next to the payload's own fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub provenance: Provenance,
    #[serde(flatten)]
    pub body: T,
}

/// Header stored in the checkpoint file next to the model shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    #[serde(flatten)]
    pub config: ModelConfig,
    pub provenance: Provenance,
}

/// Raised when an upstream artifact is absent or was produced under a
/// different configuration.
#[derive(Debug)]
pub struct UpstreamError {
    pub stage: Stage,
    pub detail: String,
}

impl fmt::Display for UpstreamError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}; run the `{}` stage first", self.detail, self.stage)
    }
}

impl std::error::Error for UpstreamError {}

/// A stage whose quality gate did not pass.
#[derive(Debug)]
pub struct GateFailure(pub String);

impl fmt::Display for GateFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "gate failed: {}", self.0)
    }
}

impl std::error::Error for GateFailure {}

/// The output directory of one experiment.
#[derive(Debug, Clone)]
pub struct OutDir {
    pub root: PathBuf,
}

impl OutDir {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self { root })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let path = self.path(name);
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    /// Reads an upstream artifact, naming `stage` when it is missing.
    pub fn read_upstream(&self, name: &str, stage: Stage) -> Result<Vec<u8>> {
        let path = self.path(name);
        if !path.exists() {
            return Err(UpstreamError {
                stage,
                detail: format!("missing {}", path.display()),
            }
            .into());
        }
        std::fs::read(&path).with_context(|| format!("reading {}", path.display()))
    }

    /// Loads a JSON artifact and checks that it matches the current
    /// configuration and checkpoint.
    pub fn load_fresh<T: DeserializeOwned>(
        &self,
        name: &str,
        stage: Stage,
        config_hash: &str,
        checkpoint_hash: Option<&str>,
    ) -> Result<Stamped<T>> {
        let bytes = self.read_upstream(name, stage)?;
        let value: Stamped<T> = serde_json::from_slice(&bytes)
            .with_context(|| format!("parsing {}", self.path(name).display()))?;
        check_fresh(name, stage, &value.provenance, config_hash, checkpoint_hash)?;
        Ok(value)
    }

    /// Like [`OutDir::load_fresh`] but `None` when the file does not exist.
    pub fn load_optional<T: DeserializeOwned>(
        &self,
        name: &str,
        stage: Stage,
        config_hash: &str,
        checkpoint_hash: Option<&str>,
    ) -> Result<Option<Stamped<T>>> {
        if !self.path(name).exists() {
            return Ok(None);
        }
        self.load_fresh(name, stage, config_hash, checkpoint_hash)
            .map(Some)
    }

    pub fn write_checkpoint(&self, params: &Parameters<f32>, provenance: Provenance) -> Result<()> {
        let header = CheckpointHeader {
            config: params.config,
            provenance,
        };
        let bytes = checkpoint::encode(&header, &params.named_tensors())?;
        self.write(MODEL, bytes)
    }

    /// Loads the base checkpoint after checking it came from the current
    /// training configuration; returns it with its file hash.
    pub fn load_checkpoint(&self, train_hash: &str) -> Result<(Parameters<f32>, String)> {
        let bytes = self.read_upstream(MODEL, Stage::Train)?;
        let (header, _): (CheckpointHeader, _) = checkpoint::decode(&bytes)?;
        check_fresh(MODEL, Stage::Train, &header.provenance, train_hash, None)?;
        let params = checkpoint::parameters_from_bytes(&bytes)?;
        Ok((params, crate::config::bytes_hash(&bytes)))
    }
}

fn check_fresh(
    name: &str,
    stage: Stage,
    provenance: &Provenance,
    config_hash: &str,
    checkpoint_hash: Option<&str>,
) -> Result<()> {
    if provenance.config_hash != config_hash {
        return Err(UpstreamError {
            stage,
            detail: format!("{name} is stale: it was produced under a different configuration"),
        }
        .into());
    }
    if let Some(want) = checkpoint_hash {
        if provenance.checkpoint_hash.as_deref() != Some(want) {
            return Err(UpstreamError {
                stage,
                detail: format!("{name} is stale: it was computed from a different checkpoint"),
            }
            .into());
        }
    }
    Ok(())
}

/// Exit status of the binary for an error chain.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<GateFailure>().is_some() {
        2
    } else {
        1
    }
}

pub fn gate(ok: bool, message: impl Into<String>) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(anyhow!(GateFailure(message.into())))
    }
}
