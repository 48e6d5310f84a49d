// SPDX-License-Identifier: MIT OR Apache-2.0

//! The experiment stages and the artifacts they exchange.

use std::collections::{BTreeMap, BTreeSet};

use anyhow::{anyhow, bail, Context, Result};
use kloc::edit::{apply_edit, finetune_baseline, target_layer, EditRequest, EditTrace};
use kloc::metrics::{evaluate_case, EvalSuite, KnowledgeTable, MetricsReport};
use kloc::model::{checkpoint, Parameters, Site};
use kloc::tensor::Tensor;
use kloc::trace::{trace_fact_set, Bucket, CorruptSpan, NoiseSpec, Sever, TraceGrid, TraceSpec};
use kloc::train::{check_recall_gate, predictions, train_with_progress, RecallReport};
use kloc::world::{generate_world, Perspective, PromptInstance, Tokenizer, World};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifacts::{
    self, gate, GateFailure, OutDir, Provenance, Stage, Stamped, UpstreamError,
};
use crate::config::{file_hash, ExperimentConfig};
use crate::svg::emit_heatmap_svg;

/// One experiment: a configuration and the directory holding its artifacts.
#[derive(Debug, Clone)]
pub struct Lab {
    pub cfg: ExperimentConfig,
    pub out: OutDir,
    /// Progress messages on stderr.
    pub verbose: bool,
}

/// The trained model with the world it was trained on.
pub struct Base {
    pub world: World,
    pub tokenizer: Tokenizer,
    pub params: Parameters<f32>,
    pub checkpoint_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainArtifact {
    pub recall_gate: f64,
    pub gate_passed: bool,
    pub report: RecallReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakCell {
    pub bucket: Bucket,
    pub layer: usize,
    pub value: f64,
}

/// An AIE grid as stored on disk; per-fact grids are dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRecord {
    /// Span that received noise.
    pub corruption: Perspective,
    /// Template family of the traced prompts.
    pub prompt_family: Perspective,
    pub noise_scale: f64,
    pub median: Option<f64>,
    pub max: Option<PeakCell>,
    pub grid: TraceGrid,
}

impl GridRecord {
    fn new(
        corruption: Perspective,
        prompt_family: Perspective,
        noise_scale: f64,
        mut grid: TraceGrid,
    ) -> Self {
        grid.facts.clear();
        Self {
            corruption,
            prompt_family,
            noise_scale,
            median: grid.median(),
            max: grid.max_cell().map(|(bucket, layer, value)| PeakCell {
                bucket,
                layer,
                value,
            }),
            grid,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TraceArtifact {
    /// Keyed `"{corruption}.{site}.{sever}"`.
    pub grids: BTreeMap<String, GridRecord>,
}

pub fn grid_key(corruption: Perspective, site: Site, sever: Sever) -> String {
    format!("{corruption}.{}.{sever}", site.as_str())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditRecord {
    pub fact_id: usize,
    pub new_object: usize,
    pub success: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<EditTrace>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub fact_id: usize,
    pub steps: usize,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerspectiveEdits {
    pub layer: usize,
    /// Percentage of edits whose own prompt now completes with the new object.
    pub success_rate: f64,
    pub edits: Vec<EditRecord>,
    pub finetune: Vec<FinetuneRecord>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EditArtifact {
    pub perspectives: BTreeMap<Perspective, PerspectiveEdits>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EditsHeader {
    provenance: Provenance,
}

/// Recall of the facts an edit did not target, before and after it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preservation {
    /// Recall of the base model on the training prompts, in percent.
    pub base_recall: f64,
    pub edits_measured: usize,
    /// Mean over edits of the recall drop on all other facts, in points.
    pub mean_drop: f64,
    pub max_drop: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub preservation: Preservation,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerspectiveMetrics {
    pub layer: usize,
    pub locate_then_edit: MethodMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finetune: Option<MethodMetrics>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricsArtifact {
    pub perspectives: BTreeMap<Perspective, PerspectiveMetrics>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceSummary {
    pub facts: usize,
    pub mean_p_clean: f64,
    pub mean_p_corrupt: f64,
    pub median: Option<f64>,
    pub max: Option<PeakCell>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub layer: usize,
    pub pre: KnowledgeTable,
    pub post: KnowledgeTable,
    pub failed_edits: usize,
    pub preservation: Preservation,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finetune_post: Option<KnowledgeTable>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Summary {
    pub traces: BTreeMap<String, TraceSummary>,
    pub metrics: BTreeMap<Perspective, MetricsSummary>,
    pub heatmaps: Vec<String>,
}

fn upstream(stage: Stage, detail: impl Into<String>) -> anyhow::Error {
    UpstreamError {
        stage,
        detail: detail.into(),
    }
    .into()
}

fn window_for(cfg: &ExperimentConfig, site: Site) -> usize {
    if site == Site::Hidden {
        cfg.trace.hidden_window
    } else {
        cfg.trace.module_window
    }
}

impl Lab {
    pub fn new(cfg: ExperimentConfig, out: OutDir) -> Self {
        Self {
            cfg,
            out,
            verbose: false,
        }
    }

    fn say(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn provenance(
        &self,
        stage: Stage,
        config_hash: String,
        checkpoint_hash: Option<&str>,
    ) -> Provenance {
        Provenance {
            stage,
            seed: self.cfg.seed,
            config_hash,
            checkpoint_hash: checkpoint_hash.map(str::to_owned),
        }
    }

    pub fn gen_world(&self) -> Result<()> {
        let world = generate_world(self.cfg.seed, &self.cfg.world)?;
        self.say(format!(
            "world: {} entities, {} relations, {} facts",
            world.entities.len(),
            world.relations.len(),
            world.facts.len()
        ));
        self.out.write_json(
            artifacts::WORLD,
            &Stamped {
                provenance: self.provenance(Stage::GenWorld, self.cfg.world_hash(), None),
                body: world,
            },
        )
    }

    pub fn load_world(&self) -> Result<World> {
        let world: World = self
            .out
            .load_fresh(
                artifacts::WORLD,
                Stage::GenWorld,
                &self.cfg.world_hash(),
                None,
            )?
            .body;
        world.validate()?;
        Ok(world)
    }

    pub fn train(&self) -> Result<()> {
        let world = self.load_world()?;
        let tokenizer = world.tokenizer()?;
        let params = Parameters::init(
            self.cfg.model.with_vocab(tokenizer.vocab_size()),
            self.cfg.seed,
        )?;
        let config = self.cfg.train.to_config(self.cfg.seed);
        let (params, report) =
            train_with_progress(params, &world, &config, |epoch, loss, recall| {
                if let Some((e, r)) = recall {
                    self.say(format!(
                        "epoch {epoch}: loss {loss:.4}, recall entity {e:.3} relation {r:.3}"
                    ));
                }
            })?;
        self.out.write_checkpoint(
            &params,
            self.provenance(Stage::Train, self.cfg.train_hash(), None),
        )?;
        let ck = file_hash(&self.out.path(artifacts::MODEL))?;
        let gate_result = check_recall_gate(&report, self.cfg.train.recall_gate);
        self.out.write_json(
            artifacts::TRAIN_REPORT,
            &Stamped {
                provenance: self.provenance(Stage::Train, self.cfg.train_hash(), Some(&ck)),
                body: TrainArtifact {
                    recall_gate: self.cfg.train.recall_gate,
                    gate_passed: gate_result.is_ok(),
                    report,
                },
            },
        )?;
        gate_result.map_err(|e| anyhow!(GateFailure(e.to_string())))
    }

    /// The trained model, refused when it did not pass the recall gate.
    pub fn load_base(&self) -> Result<Base> {
        let world = self.load_world()?;
        let tokenizer = world.tokenizer()?;
        let (params, checkpoint_hash) = self.out.load_checkpoint(&self.cfg.train_hash())?;
        let report: TrainArtifact = self
            .out
            .load_fresh(
                artifacts::TRAIN_REPORT,
                Stage::Train,
                &self.cfg.train_hash(),
                Some(&checkpoint_hash),
            )?
            .body;
        check_recall_gate(&report.report, self.cfg.train.recall_gate)
            .map_err(|e| anyhow!(GateFailure(format!("{e}; tracing and editing are refused"))))?;
        Ok(Base {
            world,
            tokenizer,
            params,
            checkpoint_hash,
        })
    }

    /// Facts whose first template of `family` the base model completes
    /// correctly, with that prompt.
    pub fn recalled_prompts(
        base: &Base,
        family: Perspective,
    ) -> Result<Vec<(usize, PromptInstance)>> {
        let prompts = base
            .world
            .facts
            .iter()
            .map(|f| base.world.verbalize(&base.tokenizer, f, family, 0))
            .collect::<kloc::Result<Vec<_>>>()?;
        let preds = predictions(&base.params, &prompts)?;
        Ok(prompts
            .into_iter()
            .zip(preds)
            .enumerate()
            .filter(|(_, (p, y))| p.answer == *y)
            .map(|(i, (p, _))| (i, p))
            .collect())
    }

    fn run_traces(
        &self,
        base: &Base,
        perspectives: &[Perspective],
        sites: &[Site],
        severs: &[Sever],
    ) -> Result<BTreeMap<String, GridRecord>> {
        let mut out = BTreeMap::new();
        let nu = self.cfg.trace.noise_multiplier * base.params.embedding_std();
        for &p in perspectives {
            let family = self.cfg.trace.family(p);
            let prompts = Self::recalled_prompts(base, family)?;
            if prompts.is_empty() {
                bail!("the model recalls no fact through the {family} templates");
            }
            let noise = NoiseSpec::new(
                CorruptSpan::for_perspective(p),
                nu,
                self.cfg.trace.noise_samples,
                self.cfg.seed,
            );
            for &site in sites {
                for &sever in severs {
                    let spec = TraceSpec {
                        noise,
                        site,
                        window: window_for(&self.cfg, site),
                        sever,
                    };
                    let grid = trace_fact_set(&base.params, &prompts, &spec)?;
                    self.say(format!(
                        "{p} corruption, {} site, sever {sever}: {} facts, p {:.3}, p* {:.3}",
                        site.as_str(),
                        grid.fact_count,
                        grid.mean_p_clean,
                        grid.mean_p_corrupt
                    ));
                    out.insert(
                        grid_key(p, site, sever),
                        GridRecord::new(p, family, nu, grid),
                    );
                }
            }
        }
        Ok(out)
    }

    fn write_trace_artifacts(
        &self,
        json: &str,
        csv: &str,
        provenance: Provenance,
        new: BTreeMap<String, GridRecord>,
    ) -> Result<TraceArtifact> {
        let mut artifact = match self.out.path(json).exists() {
            true => {
                let old: Stamped<TraceArtifact> =
                    serde_json::from_slice(&std::fs::read(self.out.path(json))?)
                        .with_context(|| format!("parsing {json}"))?;
                if old.provenance == provenance {
                    old.body
                } else {
                    TraceArtifact::default()
                }
            }
            false => TraceArtifact::default(),
        };
        artifact.grids.extend(new);
        let mut text = format!(
            "{},corruption,prompt_family,site,sever,bucket,layer,aie,facts\n",
            artifacts::CSV_PROVENANCE_HEADER
        );
        for r in artifact.grids.values() {
            for (bucket, layer, v) in r.grid.cells() {
                text.push_str(&format!(
                    "{},{},{},{},{},{},{layer},{v},{}\n",
                    provenance.csv_prefix(),
                    r.corruption,
                    r.prompt_family,
                    r.grid.site.as_str(),
                    r.grid.sever,
                    bucket.as_str(),
                    r.grid.bucket_counts[bucket.index()]
                ));
            }
        }
        let stamped = Stamped {
            provenance,
            body: artifact,
        };
        self.out.write_json(json, &stamped)?;
        self.out.write(csv, text)?;
        Ok(stamped.body)
    }

    /// Unsevered traces; the gate requires the noise to at least halve the
    /// clean probability.
    pub fn trace(&self, perspectives: &[Perspective], sites: &[Site]) -> Result<()> {
        let base = self.load_base()?;
        let grids = self.run_traces(&base, perspectives, sites, &[Sever::None])?;
        // Every site of one perspective shares the clean and corrupted runs.
        let mut failures = BTreeSet::new();
        for r in grids.values() {
            if r.grid.mean_p_corrupt >= 0.5 * r.grid.mean_p_clean {
                failures.insert(format!(
                    "{} corruption leaves p* {:.3} >= half of p {:.3}",
                    r.corruption, r.grid.mean_p_corrupt, r.grid.mean_p_clean
                ));
            }
        }
        let prov = self.provenance(
            Stage::Trace,
            self.cfg.trace_hash(),
            Some(&base.checkpoint_hash),
        );
        self.write_trace_artifacts(artifacts::AIE, artifacts::TRACE_CSV, prov, grids)?;
        gate(
            failures.is_empty(),
            failures.into_iter().collect::<Vec<_>>().join("; "),
        )
    }

    pub fn sever_trace(
        &self,
        perspectives: &[Perspective],
        sites: &[Site],
        severs: &[Sever],
    ) -> Result<()> {
        let base = self.load_base()?;
        let grids = self.run_traces(&base, perspectives, sites, severs)?;
        let prov = self.provenance(
            Stage::SeverTrace,
            self.cfg.sever_hash(),
            Some(&base.checkpoint_hash),
        );
        self.write_trace_artifacts(artifacts::SEVER, artifacts::SEVER_CSV, prov, grids)?;
        Ok(())
    }

    /// Facts recalled through both families, shuffled by the seed, each
    /// paired with a different object from its relation's pool.
    pub fn select_edits(&self, base: &Base) -> Result<Vec<(usize, usize)>> {
        let ent: BTreeSet<usize> = Self::recalled_prompts(base, Perspective::Entity)?
            .into_iter()
            .map(|x| x.0)
            .collect();
        let mut ids: Vec<usize> = Self::recalled_prompts(base, Perspective::Relation)?
            .into_iter()
            .map(|x| x.0)
            .filter(|i| ent.contains(i))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x6564_6974);
        ids.shuffle(&mut rng);
        let mut out = Vec::new();
        for id in ids {
            if out.len() == self.cfg.edit.edits {
                break;
            }
            let f = base.world.facts[id];
            let pool: Vec<usize> = base
                .world
                .object_pool(f.r)
                .into_iter()
                .filter(|&e| e != f.o)
                .collect();
            if pool.is_empty() {
                continue;
            }
            out.push((id, pool[rng.random_range(0..pool.len())]));
        }
        if out.is_empty() {
            bail!("no fact is recalled through both template families");
        }
        Ok(out)
    }

    fn edit_layer(&self, base: &Base, perspective: Perspective) -> Result<usize> {
        if let Some(layer) = self.cfg.edit.layer {
            return Ok(layer);
        }
        let aie: TraceArtifact = self
            .out
            .load_fresh(
                artifacts::AIE,
                Stage::Trace,
                &self.cfg.trace_hash(),
                Some(&base.checkpoint_hash),
            )?
            .body;
        let key = grid_key(perspective, Site::MlpOut, Sever::None);
        let record = aie.grids.get(&key).ok_or_else(|| {
            upstream(
                Stage::Trace,
                format!("{} has no {key} grid", artifacts::AIE),
            )
        })?;
        Ok(target_layer(&record.grid)?)
    }

    fn requests(base: &Base, picks: &[(usize, usize)], p: Perspective) -> Result<Vec<EditRequest>> {
        picks
            .iter()
            .map(|&(id, new)| {
                Ok(EditRequest::new(
                    &base.world,
                    &base.tokenizer,
                    id,
                    new,
                    p,
                    0,
                )?)
            })
            .collect()
    }

    /// Single-fact edits in each perspective, plus the fine-tuning baseline
    /// on the first few of them.
    pub fn edit(&self, perspectives: &[Perspective]) -> Result<()> {
        let base = self.load_base()?;
        let picks = self.select_edits(&base)?;
        let prov = self.provenance(
            Stage::Edit,
            self.cfg.edit_hash(),
            Some(&base.checkpoint_hash),
        );
        let (mut artifact, mut arrays) = self.previous_edits(&prov)?;
        let mut failures = Vec::new();
        for &p in perspectives {
            let layer = self.edit_layer(&base, p)?;
            let config = self.cfg.edit.to_config(layer, self.cfg.seed);
            let requests = Self::requests(&base, &picks, p)?;
            arrays.retain(|name, _| !name.starts_with(&format!("{p}.")));
            let mut records = Vec::with_capacity(requests.len());
            for req in &requests {
                match apply_edit(
                    &base.params,
                    &base.world,
                    std::slice::from_ref(req),
                    &config,
                ) {
                    Ok((edited, trace)) => {
                        arrays.insert(
                            format!("{p}.rome.{}", req.fact_id),
                            edited.layers[layer].w_proj.clone(),
                        );
                        records.push(EditRecord {
                            fact_id: req.fact_id,
                            new_object: req.new_object,
                            success: trace.requests.iter().all(|r| r.success),
                            error: None,
                            trace: Some(trace),
                        });
                    }
                    Err(e) => records.push(EditRecord {
                        fact_id: req.fact_id,
                        new_object: req.new_object,
                        success: false,
                        error: Some(e.to_string()),
                        trace: None,
                    }),
                }
            }
            let ft_config = self.cfg.edit.finetune(layer);
            let mut finetune = Vec::new();
            for req in requests.iter().take(self.cfg.edit.finetune_edits) {
                let (tuned, losses) =
                    finetune_baseline(&base.params, std::slice::from_ref(req), &ft_config)?;
                arrays.insert(
                    format!("{p}.ft.{}.w_fc", req.fact_id),
                    tuned.layers[layer].w_fc.clone(),
                );
                arrays.insert(
                    format!("{p}.ft.{}.w_proj", req.fact_id),
                    tuned.layers[layer].w_proj.clone(),
                );
                finetune.push(FinetuneRecord {
                    fact_id: req.fact_id,
                    steps: losses.len(),
                    final_loss: losses.last().copied(),
                });
            }
            let ok = records.iter().filter(|r| r.success).count();
            let success_rate = (ok as f64 / records.len() as f64 * 10_000.0).round() / 100.0;
            self.say(format!(
                "{p} edits at layer {layer}: {ok}/{} succeeded",
                records.len()
            ));
            if success_rate < self.cfg.edit.success_gate {
                failures.push(format!(
                    "{p} edit success {success_rate:.2}% below {:.2}%",
                    self.cfg.edit.success_gate
                ));
            }
            artifact.perspectives.insert(
                p,
                PerspectiveEdits {
                    layer,
                    success_rate,
                    edits: records,
                    finetune,
                },
            );
        }
        let named: Vec<(String, &Tensor<f32>)> =
            arrays.iter().map(|(k, v)| (k.clone(), v)).collect();
        let bytes = checkpoint::encode(
            &EditsHeader {
                provenance: prov.clone(),
            },
            &named,
        )?;
        self.out.write(artifacts::EDITS, bytes)?;
        self.out.write_json(
            artifacts::EDIT_TRACE,
            &Stamped {
                provenance: prov,
                body: artifact,
            },
        )?;
        gate(failures.is_empty(), failures.join("; "))
    }

    /// Edits from an earlier run of the same configuration, kept when only
    /// some perspectives are recomputed.
    fn previous_edits(
        &self,
        prov: &Provenance,
    ) -> Result<(EditArtifact, BTreeMap<String, Tensor<f32>>)> {
        let (json, bin) = (
            self.out.path(artifacts::EDIT_TRACE),
            self.out.path(artifacts::EDITS),
        );
        if !(json.exists() && bin.exists()) {
            return Ok(Default::default());
        }
        let old: Stamped<EditArtifact> = serde_json::from_slice(&std::fs::read(json)?)?;
        let (header, arrays): (EditsHeader, _) = checkpoint::decode(&std::fs::read(bin)?)?;
        if old.provenance != *prov || header.provenance != *prov {
            return Ok(Default::default());
        }
        Ok((old.body, arrays.into_iter().collect()))
    }

    fn load_edits(&self, base: &Base) -> Result<(EditArtifact, BTreeMap<String, Tensor<f32>>)> {
        let hash = self.cfg.edit_hash();
        let artifact: EditArtifact = self
            .out
            .load_fresh(
                artifacts::EDIT_TRACE,
                Stage::Edit,
                &hash,
                Some(&base.checkpoint_hash),
            )?
            .body;
        let bytes = self.out.read_upstream(artifacts::EDITS, Stage::Edit)?;
        let (header, arrays): (EditsHeader, _) = checkpoint::decode(&bytes)?;
        if header.provenance.config_hash != hash
            || header.provenance.checkpoint_hash.as_deref() != Some(base.checkpoint_hash.as_str())
        {
            return Err(upstream(
                Stage::Edit,
                format!("{} is stale", artifacts::EDITS),
            ));
        }
        Ok((artifact, arrays.into_iter().collect()))
    }

    /// Reliability and generality of every edit through both families, and
    /// recall of the untouched facts.
    pub fn eval(&self) -> Result<()> {
        let base = self.load_base()?;
        let (edits, arrays) = self.load_edits(&base)?;
        if edits.perspectives.is_empty() {
            return Err(upstream(
                Stage::Edit,
                format!("{} holds no edits", artifacts::EDIT_TRACE),
            ));
        }
        let probes = PreservationProbes::new(&base)?;
        let mut artifact = MetricsArtifact::default();
        let mut failures = Vec::new();
        for (&p, pe) in &edits.perspectives {
            let layer = pe.layer;
            let picks: Vec<(usize, usize)> =
                pe.edits.iter().map(|r| (r.fact_id, r.new_object)).collect();
            let requests = Self::requests(&base, &picks, p)?;
            let suite = EvalSuite::from_requests(&base.world, &base.tokenizer, &requests)?;

            let rome = |id: usize,
                        record: &EditRecord|
             -> Result<std::result::Result<Parameters<f32>, String>> {
                if let Some(e) = &record.error {
                    return Ok(Err(e.clone()));
                }
                let w = arrays.get(&format!("{p}.rome.{id}")).ok_or_else(|| {
                    upstream(
                        Stage::Edit,
                        format!("{} lacks edit {p}.{id}", artifacts::EDITS),
                    )
                })?;
                let mut edited = base.params.clone();
                edited.layers[layer].w_proj = w.clone();
                Ok(Ok(edited))
            };
            let mut outcomes = Vec::new();
            let mut drops = Vec::new();
            for (case, record) in suite.cases.iter().zip(&pe.edits) {
                let edited = rome(case.fact_id, record)?;
                if let Ok(e) = &edited {
                    drops.push(probes.drop(e, case.fact_id)?);
                }
                outcomes.push(evaluate_case(
                    &base.params,
                    edited.as_ref().map_err(|e| e.clone()),
                    case,
                )?);
            }
            let report = MetricsReport::from_outcomes(p, outcomes)?;
            let locate_then_edit = MethodMetrics {
                preservation: probes.summarize(drops),
                report,
            };

            let finetune = if pe.finetune.is_empty() {
                None
            } else {
                let mut outcomes = Vec::new();
                let mut drops = Vec::new();
                for ft in &pe.finetune {
                    let case = suite
                        .cases
                        .iter()
                        .find(|c| c.fact_id == ft.fact_id)
                        .ok_or_else(|| anyhow!("fine-tuned fact {} was not edited", ft.fact_id))?;
                    let get = |m: &str| {
                        arrays
                            .get(&format!("{p}.ft.{}.{m}", ft.fact_id))
                            .ok_or_else(|| {
                                upstream(
                                    Stage::Edit,
                                    format!(
                                        "{} lacks fine-tuned {m} for fact {}",
                                        artifacts::EDITS,
                                        ft.fact_id
                                    ),
                                )
                            })
                    };
                    let mut tuned = base.params.clone();
                    tuned.layers[layer].w_fc = get("w_fc")?.clone();
                    tuned.layers[layer].w_proj = get("w_proj")?.clone();
                    drops.push(probes.drop(&tuned, ft.fact_id)?);
                    outcomes.push(evaluate_case(&base.params, Ok(&tuned), case)?);
                }
                Some(MethodMetrics {
                    preservation: probes.summarize(drops),
                    report: MetricsReport::from_outcomes(p, outcomes)?,
                })
            };

            let own = locate_then_edit.report.post.get(p);
            self.say(format!(
                "{p} edits: own reliability {:.2}, generality {:.2}; other family reliability {:.2}; recall drop {:.2} points",
                own.reliability,
                own.generality,
                locate_then_edit.report.post.get(p.other()).reliability,
                locate_then_edit.preservation.mean_drop
            ));
            if own.reliability < self.cfg.edit.success_gate {
                failures.push(format!(
                    "{p} reliability {:.2} below {:.2}",
                    own.reliability, self.cfg.edit.success_gate
                ));
            }
            if locate_then_edit.preservation.mean_drop >= self.cfg.edit.preservation_gate {
                failures.push(format!(
                    "{p} edits drop preserved recall by {:.2} points",
                    locate_then_edit.preservation.mean_drop
                ));
            }
            artifact.perspectives.insert(
                p,
                PerspectiveMetrics {
                    layer,
                    locate_then_edit,
                    finetune,
                },
            );
        }
        let prov = self.provenance(
            Stage::Eval,
            self.cfg.eval_hash(),
            Some(&base.checkpoint_hash),
        );
        let mut csv = format!(
            "{},method,edit_perspective,phase,probe,reliability,generality\n",
            artifacts::CSV_PROVENANCE_HEADER
        );
        for pm in artifact.perspectives.values() {
            let methods = [
                ("locate_then_edit", Some(&pm.locate_then_edit)),
                ("finetune", pm.finetune.as_ref()),
            ];
            for (name, m) in methods {
                if let Some(m) = m {
                    for line in m.report.to_csv().lines().skip(1) {
                        csv.push_str(&format!("{},{name},{line}\n", prov.csv_prefix()));
                    }
                }
            }
        }
        self.out.write(artifacts::METRICS_CSV, csv)?;
        self.out.write_json(
            artifacts::METRICS,
            &Stamped {
                provenance: prov,
                body: artifact,
            },
        )?;
        gate(failures.is_empty(), failures.join("; "))
    }

    /// Heatmaps of every stored grid and a summary of the experiment.
    pub fn report(&self) -> Result<()> {
        self.load_world()?;
        let (_, ck) = self.out.load_checkpoint(&self.cfg.train_hash())?;
        let aie: TraceArtifact = self
            .out
            .load_fresh(
                artifacts::AIE,
                Stage::Trace,
                &self.cfg.trace_hash(),
                Some(&ck),
            )?
            .body;
        let sever: Option<Stamped<TraceArtifact>> = self.out.load_optional(
            artifacts::SEVER,
            Stage::SeverTrace,
            &self.cfg.sever_hash(),
            Some(&ck),
        )?;
        let metrics: Option<Stamped<MetricsArtifact>> = self.out.load_optional(
            artifacts::METRICS,
            Stage::Eval,
            &self.cfg.eval_hash(),
            Some(&ck),
        )?;
        let mut summary = Summary::default();
        let grids = aie
            .grids
            .iter()
            .chain(sever.iter().flat_map(|s| s.body.grids.iter()));
        for (key, r) in grids {
            let name = format!("heatmap_{}.svg", key.replace('.', "_"));
            let mut title = format!(
                "AIE of restoring {} states, {} corrupted, {} prompts",
                r.grid.site.as_str(),
                r.corruption,
                r.prompt_family
            );
            if r.grid.sever != Sever::None {
                title.push_str(&format!(", {} severed", r.grid.sever));
            }
            self.out.write(&name, emit_heatmap_svg(&r.grid, &title)?)?;
            summary.heatmaps.push(name);
            summary.traces.insert(
                key.clone(),
                TraceSummary {
                    facts: r.grid.fact_count,
                    mean_p_clean: r.grid.mean_p_clean,
                    mean_p_corrupt: r.grid.mean_p_corrupt,
                    median: r.median,
                    max: r.max,
                },
            );
        }
        if let Some(m) = metrics {
            for (p, pm) in m.body.perspectives {
                summary.metrics.insert(
                    p,
                    MetricsSummary {
                        layer: pm.layer,
                        pre: pm.locate_then_edit.report.pre,
                        post: pm.locate_then_edit.report.post,
                        failed_edits: pm.locate_then_edit.report.failed_edits,
                        preservation: pm.locate_then_edit.preservation,
                        finetune_post: pm.finetune.map(|f| f.report.post),
                    },
                );
            }
        }
        self.say(format!("wrote {} heatmaps", summary.heatmaps.len()));
        self.out.write_json(
            artifacts::SUMMARY,
            &Stamped {
                provenance: self.provenance(Stage::Report, self.cfg.report_hash(), Some(&ck)),
                body: summary,
            },
        )
    }

    /// Every stage in order. Gate failures are collected so later stages
    /// still report; any other error stops the run.
    pub fn run_all(&self) -> Result<()> {
        let both = Perspective::BOTH;
        let sites = [Site::Hidden, Site::MlpOut, Site::AttnOut];
        let mut gates = Vec::new();
        let stages: [(Stage, &dyn Fn() -> Result<()>); 7] = [
            (Stage::GenWorld, &|| self.gen_world()),
            (Stage::Train, &|| self.train()),
            (Stage::Trace, &|| self.trace(&both, &sites)),
            (Stage::SeverTrace, &|| {
                self.sever_trace(&both, &[Site::Hidden], &[Sever::Mlp, Sever::Attn])
            }),
            (Stage::Edit, &|| self.edit(&both)),
            (Stage::Eval, &|| self.eval()),
            (Stage::Report, &|| self.report()),
        ];
        for (stage, run) in stages {
            self.say(format!("== {stage}"));
            match run() {
                Ok(()) => {}
                Err(e) if e.downcast_ref::<GateFailure>().is_some() => {
                    let GateFailure(msg) = e.downcast_ref::<GateFailure>().expect("checked");
                    self.say(format!("{stage}: gate failed: {msg}"));
                    gates.push(format!("{stage}: {msg}"));
                    if stage == Stage::Train {
                        break;
                    }
                }
                Err(e) => return Err(e.context(format!("stage {stage}"))),
            }
        }
        gate(gates.is_empty(), gates.join("; "))
    }
}

/// Training prompts of every fact in both families, grouped by fact.
struct PreservationProbes {
    prompts: Vec<PromptInstance>,
    fact_of: Vec<usize>,
    base_hits: Vec<bool>,
}

impl PreservationProbes {
    fn new(base: &Base) -> Result<Self> {
        let split = base.world.split_probe_sets()?;
        let mut prompts = Vec::new();
        let mut fact_of = Vec::new();
        for (i, f) in base.world.facts.iter().enumerate() {
            for p in Perspective::BOTH {
                for &t in &split.get(f.r, p).train {
                    prompts.push(base.world.verbalize(&base.tokenizer, f, p, t)?);
                    fact_of.push(i);
                }
            }
        }
        let base_hits = Self::hits(&base.params, &prompts)?;
        Ok(Self {
            prompts,
            fact_of,
            base_hits,
        })
    }

    fn hits(params: &Parameters<f32>, prompts: &[PromptInstance]) -> Result<Vec<bool>> {
        let preds = predictions(params, prompts)?;
        Ok(preds
            .iter()
            .zip(prompts)
            .map(|(y, p)| *y == p.answer)
            .collect())
    }

    /// Recall drop in points over the prompts of every fact but `edited`.
    fn drop(&self, edited: &Parameters<f32>, fact: usize) -> Result<f64> {
        let after = Self::hits(edited, &self.prompts)?;
        let (mut n, mut before_ok, mut after_ok) = (0usize, 0usize, 0usize);
        for ((&f, &b), &a) in self.fact_of.iter().zip(&self.base_hits).zip(&after) {
            if f != fact {
                n += 1;
                before_ok += b as usize;
                after_ok += a as usize;
            }
        }
        Ok(100.0 * (before_ok as f64 - after_ok as f64) / n.max(1) as f64)
    }

    fn summarize(&self, drops: Vec<f64>) -> Preservation {
        let hits = self.base_hits.iter().filter(|&&h| h).count();
        let round = |x: f64| (x * 100.0).round() / 100.0;
        Preservation {
            base_recall: round(100.0 * hits as f64 / self.base_hits.len().max(1) as f64),
            edits_measured: drops.len(),
            mean_drop: round(if drops.is_empty() {
                0.0
            } else {
                drops.iter().sum::<f64>() / drops.len() as f64
            }),
            max_drop: round(drops.iter().copied().fold(0.0, f64::max)),
        }
    }
}
