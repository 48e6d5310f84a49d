// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment configuration and the per-stage hashes derived from it.

use std::path::Path;

use anyhow::{ensure, Context, Result};
use kloc::edit::{EditConfig, FinetuneConfig, SolverKind};
use kloc::model::ModelConfig;
use kloc::train::{OptimizerKind, TrainConfig};
use kloc::world::{Perspective, WorldConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Transformer shape; the vocabulary size comes from the generated world.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let c = ModelConfig::toy(2);
        Self {
            n_layers: c.n_layers,
            d_model: c.d_model,
            n_heads: c.n_heads,
            d_ff: c.d_ff,
            max_len: c.max_len,
        }
    }
}

impl ModelShape {
    pub fn with_vocab(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            vocab_size,
            max_len: self.max_len,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub recall_target: f64,
    pub max_prefix: usize,
    pub eval_every: usize,
    /// Minimum recall on both families before tracing or editing.
    pub recall_gate: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            optimizer: t.optimizer,
            recall_target: t.recall_target,
            max_prefix: t.max_prefix,
            eval_every: t.eval_every,
            recall_gate: 0.9,
        }
    }
}

impl TrainSettings {
    pub fn to_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            optimizer: self.optimizer,
            seed,
            recall_target: self.recall_target,
            max_prefix: self.max_prefix,
            eval_every: self.eval_every,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceSettings {
    /// Noise standard deviation as a multiple of the token-embedding std.
    pub noise_multiplier: f64,
    pub noise_samples: usize,
    pub hidden_window: usize,
    pub module_window: usize,
    /// Template family traced for each corruption perspective; `None` uses
    /// the other perspective's family, so the corrupted span precedes the
    /// final token.
    pub prompt_family: Option<Perspective>,
}

impl Default for TraceSettings {
    fn default() -> Self {
        Self {
            noise_multiplier: 3.0,
            noise_samples: 5,
            hidden_window: 1,
            module_window: 5,
            prompt_family: None,
        }
    }
}

impl TraceSettings {
    pub fn family(&self, corruption: Perspective) -> Perspective {
        self.prompt_family.unwrap_or(corruption.other())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditSettings {
    /// Number of single-fact edits per perspective.
    pub edits: usize,
    /// Edited layer; `None` takes the peak layer of the traced MLP grid.
    pub layer: Option<usize>,
    pub delta_steps: usize,
    pub delta_lr: f64,
    pub norm_cap_factor: f64,
    pub target_probability: f64,
    pub stall_steps: usize,
    pub preserve: usize,
    pub augment: usize,
    pub max_prefix: usize,
    pub lambda: Option<f64>,
    pub solver: SolverKind,
    /// Minimum share of edits (percent) that must land on their own prompt.
    pub success_gate: f64,
    /// Maximum tolerated recall drop of preserved facts, in points.
    pub preservation_gate: f64,
    /// How many of the edits are repeated with the fine-tuning baseline.
    pub finetune_edits: usize,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
}

impl Default for EditSettings {
    fn default() -> Self {
        let e = EditConfig::new(0);
        let f = FinetuneConfig::new(0);
        Self {
            edits: 50,
            layer: None,
            delta_steps: e.delta_steps,
            delta_lr: e.delta_lr,
            norm_cap_factor: e.norm_cap_factor,
            target_probability: e.target_probability,
            stall_steps: e.stall_steps,
            preserve: e.preserve,
            augment: e.augment,
            max_prefix: e.max_prefix,
            lambda: e.lambda,
            solver: e.solver,
            success_gate: 90.0,
            preservation_gate: 5.0,
            finetune_edits: 10,
            finetune_steps: f.steps,
            finetune_lr: f.lr,
        }
    }
}

impl EditSettings {
    pub fn to_config(&self, layer: usize, seed: u64) -> EditConfig {
        EditConfig {
            layer,
            delta_steps: self.delta_steps,
            delta_lr: self.delta_lr,
            norm_cap_factor: self.norm_cap_factor,
            target_probability: self.target_probability,
            stall_steps: self.stall_steps,
            preserve: self.preserve,
            augment: self.augment,
            max_prefix: self.max_prefix,
            lambda: self.lambda,
            solver: self.solver,
            seed,
        }
    }

    pub fn finetune(&self, layer: usize) -> FinetuneConfig {
        FinetuneConfig {
            steps: self.finetune_steps,
            lr: self.finetune_lr,
            ..FinetuneConfig::new(layer)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub model: ModelShape,
    pub train: TrainSettings,
    pub trace: TraceSettings,
    pub edit: EditSettings,
}

/// Hex SHA-256 of a byte string.
pub fn bytes_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(bytes_hash(&bytes))
}

fn hash_of<T: Serialize>(value: &T) -> String {
    bytes_hash(&serde_json::to_vec(value).expect("configuration serializes"))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.with_vocab(2).validate()?;
        self.train.to_config(self.seed).validate()?;
        ensure!(
            (0.0..=1.0).contains(&self.train.recall_gate),
            "recall gate must lie in [0, 1]"
        );
        ensure!(
            self.trace.noise_multiplier >= 0.0,
            "noise multiplier must be non-negative"
        );
        ensure!(
            self.trace.noise_samples >= 1,
            "at least one noise sample is required"
        );
        ensure!(
            self.trace.hidden_window % 2 == 1 && self.trace.module_window % 2 == 1,
            "trace windows must be odd"
        );
        ensure!(
            self.trace.hidden_window.max(self.trace.module_window) <= self.model.n_layers,
            "trace windows cannot exceed the {} layers",
            self.model.n_layers
        );
        ensure!(self.edit.edits >= 1, "at least one edit is required");
        self.edit
            .to_config(self.edit.layer.unwrap_or(0), self.seed)
            .validate(self.model.n_layers)?;
        Ok(())
    }

    pub fn world_hash(&self) -> String {
        hash_of(&("gen-world", self.seed, &self.world))
    }

    pub fn train_hash(&self) -> String {
        hash_of(&("train", self.world_hash(), &self.model, &self.train))
    }

    pub fn trace_hash(&self) -> String {
        hash_of(&("trace", self.train_hash(), &self.trace))
    }

    pub fn sever_hash(&self) -> String {
        hash_of(&("sever-trace", self.train_hash(), &self.trace))
    }

    pub fn edit_hash(&self) -> String {
        hash_of(&("edit", self.trace_hash(), &self.edit))
    }

    pub fn eval_hash(&self) -> String {
        hash_of(&("eval", self.edit_hash()))
    }

    pub fn report_hash(&self) -> String {
        hash_of(&("report", self.eval_hash(), self.sever_hash()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hashes_follow_dependencies() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.edit.preserve = 10;
        assert_eq!(a.trace_hash(), b.trace_hash());
        assert_ne!(a.edit_hash(), b.edit_hash());
        b.seed = 1;
        assert_ne!(a.world_hash(), b.world_hash());
        assert_ne!(a.trace_hash(), b.trace_hash());
    }

    #[test]
    fn json_round_trip_and_partial_files() {
        let a = ExperimentConfig::default();
        let text = serde_json::to_string(&a).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&text).unwrap(), a);
        let partial: ExperimentConfig =
            serde_json::from_str(r#"{"seed": 3, "edit": {"edits": 5}}"#).unwrap();
        assert_eq!(partial.seed, 3);
        assert_eq!(partial.edit.edits, 5);
        assert_eq!(partial.train, a.train);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sed": 3}"#).is_err());
    }
}
