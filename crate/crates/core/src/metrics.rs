// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reliability and generality of edits, probed through both template
//! families.

use serde::{Deserialize, Serialize};

use crate::edit::EditRequest;
use crate::error::{Error, Result};
use crate::model::Parameters;
use crate::train::predictions;
use crate::world::{Perspective, PromptInstance, Tokenizer, World};

/// A probe prompt asking for the new object, with its rephrasings.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeCase {
    pub fact_id: usize,
    pub prompt: PromptInstance,
    pub rephrasings: Vec<PromptInstance>,
}

fn percent(hits: f64, total: f64) -> f64 {
    (hits / total * 10_000.0).round() / 100.0
}

fn hits(params: &Parameters<f32>, prompts: &[PromptInstance]) -> Result<Vec<bool>> {
    let preds = predictions(params, prompts)?;
    Ok(preds
        .iter()
        .zip(prompts)
        .map(|(p, q)| *p == q.answer)
        .collect())
}

/// Share of cases whose prompt completes with its answer, in percent.
pub fn reliability(params: &Parameters<f32>, cases: &[ProbeCase]) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::Evaluation(
            "reliability over an empty edit set".into(),
        ));
    }
    let prompts: Vec<PromptInstance> = cases.iter().map(|c| c.prompt.clone()).collect();
    let h = hits(params, &prompts)?;
    Ok(percent(
        h.iter().filter(|&&x| x).count() as f64,
        h.len() as f64,
    ))
}

/// Mean over cases of the share of rephrasings completing with the answer,
/// in percent.
pub fn generality(params: &Parameters<f32>, cases: &[ProbeCase]) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::Evaluation(
            "generality over an empty edit set".into(),
        ));
    }
    if let Some(c) = cases.iter().find(|c| c.rephrasings.is_empty()) {
        return Err(Error::Evaluation(format!(
            "fact {} has no rephrasings",
            c.fact_id
        )));
    }
    let prompts: Vec<PromptInstance> = cases
        .iter()
        .flat_map(|c| c.rephrasings.iter().cloned())
        .collect();
    let h = hits(params, &prompts)?;
    let mut at = 0;
    let mut total = 0.0;
    for c in cases {
        let n = c.rephrasings.len();
        total += h[at..at + n].iter().filter(|&&x| x).count() as f64 / n as f64;
        at += n;
    }
    Ok(percent(total, cases.len() as f64))
}

/// Probes for one edited fact through both families.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteCase {
    pub fact_id: usize,
    pub edit_perspective: Perspective,
    pub original: usize,
    pub target: usize,
    pub entity: ProbeCase,
    pub relation: ProbeCase,
}

impl SuiteCase {
    pub fn probes(&self, perspective: Perspective) -> &ProbeCase {
        match perspective {
            Perspective::Entity => &self.entity,
            Perspective::Relation => &self.relation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalSuite {
    pub cases: Vec<SuiteCase>,
}

impl EvalSuite {
    /// Probes each request's fact through the edit prompt's template id in
    /// both families (reliability) and the held-out templates (generality).
    pub fn from_requests(
        world: &World,
        tokenizer: &Tokenizer,
        requests: &[EditRequest],
    ) -> Result<Self> {
        let split = world.split_probe_sets()?;
        let cases = requests
            .iter()
            .map(|r| {
                let probe = |p: Perspective| -> Result<ProbeCase> {
                    let s = split.get(r.fact.r, p);
                    let target = r.target();
                    let prompt = world
                        .verbalize(tokenizer, &r.fact, p, r.prompt.template_id)?
                        .with_answer(target);
                    let rephrasings = s
                        .held_out
                        .iter()
                        .map(|&t| {
                            Ok(world
                                .verbalize(tokenizer, &r.fact, p, t)?
                                .with_answer(target))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    if rephrasings.is_empty() {
                        return Err(Error::Evaluation(format!(
                            "no held-out {p} templates for fact {}",
                            r.fact_id
                        )));
                    }
                    Ok(ProbeCase {
                        fact_id: r.fact_id,
                        prompt,
                        rephrasings,
                    })
                };
                Ok(SuiteCase {
                    fact_id: r.fact_id,
                    edit_perspective: r.perspective,
                    original: r.original,
                    target: r.target(),
                    entity: probe(Perspective::Entity)?,
                    relation: probe(Perspective::Relation)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cases })
    }

    pub fn probes(&self, perspective: Perspective) -> Vec<ProbeCase> {
        self.cases
            .iter()
            .map(|c| c.probes(perspective).clone())
            .collect()
    }

    /// The single perspective all edits were made under.
    pub fn edit_perspective(&self) -> Result<Perspective> {
        let first = self
            .cases
            .first()
            .ok_or_else(|| Error::Report("empty evaluation suite".into()))?
            .edit_perspective;
        if self.cases.iter().any(|c| c.edit_perspective != first) {
            return Err(Error::Report(
                "edit set mixes entity and relation edits".into(),
            ));
        }
        Ok(first)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub reliable: bool,
    pub general: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactOutcome {
    pub fact_id: usize,
    pub original: usize,
    pub target: usize,
    pub pre_entity: ProbeOutcome,
    pub pre_relation: ProbeOutcome,
    pub post_entity: ProbeOutcome,
    pub post_relation: ProbeOutcome,
    /// The edit could not be computed; every post probe counts as a miss.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn probe_outcome(params: &Parameters<f32>, case: &ProbeCase) -> Result<ProbeOutcome> {
    let mut prompts = vec![case.prompt.clone()];
    prompts.extend(case.rephrasings.iter().cloned());
    let h = hits(params, &prompts)?;
    Ok(ProbeOutcome {
        reliable: h[0],
        general: h[1..].to_vec(),
    })
}

fn missed(case: &ProbeCase) -> ProbeOutcome {
    ProbeOutcome {
        reliable: false,
        general: vec![false; case.rephrasings.len()],
    }
}

/// Scores one suite case on the base model and, when available, on the
/// checkpoint carrying its edit.
pub fn evaluate_case(
    base: &Parameters<f32>,
    edited: std::result::Result<&Parameters<f32>, String>,
    case: &SuiteCase,
) -> Result<FactOutcome> {
    let (post_entity, post_relation, error) = match edited {
        Ok(p) => (
            probe_outcome(p, &case.entity)?,
            probe_outcome(p, &case.relation)?,
            None,
        ),
        Err(e) => (missed(&case.entity), missed(&case.relation), Some(e)),
    };
    Ok(FactOutcome {
        fact_id: case.fact_id,
        original: case.original,
        target: case.target,
        pre_entity: probe_outcome(base, &case.entity)?,
        pre_relation: probe_outcome(base, &case.relation)?,
        post_entity,
        post_relation,
        error,
    })
}

/// Reliability and generality of one probe family, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub reliability: f64,
    pub generality: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeTable {
    pub entity_knowledge: Cell,
    pub relation_knowledge: Cell,
}

impl KnowledgeTable {
    pub fn get(&self, probe: Perspective) -> Cell {
        match probe {
            Perspective::Entity => self.entity_knowledge,
            Perspective::Relation => self.relation_knowledge,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub edit_perspective: Perspective,
    pub edits: usize,
    pub failed_edits: usize,
    pub pre: KnowledgeTable,
    pub post: KnowledgeTable,
    pub outcomes: Vec<FactOutcome>,
}

fn cell(outcomes: &[FactOutcome], pick: impl Fn(&FactOutcome) -> &ProbeOutcome) -> Cell {
    let n = outcomes.len() as f64;
    let rel = outcomes.iter().filter(|o| pick(o).reliable).count() as f64;
    let gen: f64 = outcomes
        .iter()
        .map(|o| {
            let g = &pick(o).general;
            g.iter().filter(|&&x| x).count() as f64 / g.len().max(1) as f64
        })
        .sum();
    Cell {
        reliability: percent(rel, n),
        generality: percent(gen, n),
    }
}

impl MetricsReport {
    pub fn from_outcomes(
        edit_perspective: Perspective,
        mut outcomes: Vec<FactOutcome>,
    ) -> Result<Self> {
        if outcomes.is_empty() {
            return Err(Error::Evaluation("no edit outcomes to report".into()));
        }
        outcomes.sort_by_key(|o| o.fact_id);
        let table = |e: fn(&FactOutcome) -> &ProbeOutcome, r: fn(&FactOutcome) -> &ProbeOutcome| {
            KnowledgeTable {
                entity_knowledge: cell(&outcomes, e),
                relation_knowledge: cell(&outcomes, r),
            }
        };
        Ok(Self {
            edit_perspective,
            edits: outcomes.len(),
            failed_edits: outcomes.iter().filter(|o| o.error.is_some()).count(),
            pre: table(|o| &o.pre_entity, |o| &o.pre_relation),
            post: table(|o| &o.post_entity, |o| &o.post_relation),
            outcomes,
        })
    }

    /// One row per (phase, probe family).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("edit_perspective,phase,probe,reliability,generality\n");
        for (phase, t) in [("pre", &self.pre), ("post", &self.post)] {
            for p in Perspective::BOTH {
                let c = t.get(p);
                out.push_str(&format!(
                    "{},{phase},{},{:.2},{:.2}\n",
                    self.edit_perspective, p, c.reliability, c.generality
                ));
            }
        }
        out
    }
}

/// Evaluates a checkpoint holding every edit of `suite` against the base
/// model, filling both probe families.
pub fn cross_perspective_report(
    base: &Parameters<f32>,
    edited: &Parameters<f32>,
    suite: &EvalSuite,
) -> Result<MetricsReport> {
    let perspective = suite.edit_perspective()?;
    let outcomes = suite
        .cases
        .iter()
        .map(|c| evaluate_case(base, Ok(edited), c))
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_outcomes(perspective, outcomes)
}
