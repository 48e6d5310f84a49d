// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic closed world of `(subject, relation, object)` facts and their
//! verbalizations.

mod templates;
mod tokenizer;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use templates::{Piece, Template};
pub use tokenizer::{Tokenizer, PAD, UNK};

/// Which span of a fact sits next to the answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Perspective {
    Entity,
    Relation,
}

impl Perspective {
    pub const BOTH: [Perspective; 2] = [Perspective::Entity, Perspective::Relation];

    pub fn as_str(&self) -> &'static str {
        match self {
            Perspective::Entity => "entity",
            Perspective::Relation => "relation",
        }
    }

    pub fn other(&self) -> Self {
        match self {
            Perspective::Entity => Perspective::Relation,
            Perspective::Relation => Perspective::Entity,
        }
    }
}

impl fmt::Display for Perspective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Perspective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entity" => Ok(Perspective::Entity),
            "relation" => Ok(Perspective::Relation),
            other => Err(Error::Config(format!("unknown perspective {other:?}"))),
        }
    }
}

/// A triple of entity and relation indices, serialized as `[s, r, o]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct Fact {
    pub s: usize,
    pub r: usize,
    pub o: usize,
}

impl From<[usize; 3]> for Fact {
    fn from([s, r, o]: [usize; 3]) -> Self {
        Self { s, r, o }
    }
}

impl From<Fact> for [usize; 3] {
    fn from(f: Fact) -> Self {
        [f.s, f.r, f.o]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub id: String,
    pub templates_entity: Vec<String>,
    pub templates_relation: Vec<String>,
}

impl Relation {
    pub fn templates(&self, perspective: Perspective) -> &[String] {
        match perspective {
            Perspective::Entity => &self.templates_entity,
            Perspective::Relation => &self.templates_relation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_facts: usize,
    /// Candidate objects per relation.
    pub object_pool: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_entities: 50,
            n_relations: 10,
            n_facts: 300,
            object_pool: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct World {
    pub seed: u64,
    pub entities: Vec<String>,
    pub relations: Vec<Relation>,
    pub facts: Vec<Fact>,
}

/// Half-open token range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn contains(&self, i: usize) -> bool {
        (self.start..self.end).contains(&i)
    }

    pub fn last(&self) -> usize {
        self.end - 1
    }

    fn shifted(self, by: usize) -> Self {
        Self {
            start: self.start + by,
            end: self.end + by,
        }
    }
}

/// One fact rendered through one template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptInstance {
    pub tokens: Vec<usize>,
    pub subject: Span,
    pub relation: Span,
    pub answer: usize,
    pub perspective: Perspective,
    pub template_id: usize,
}

impl PromptInstance {
    /// The span that anchors a given perspective: subject tokens for the
    /// entity view, relation tokens for the relation view.
    pub fn span(&self, perspective: Perspective) -> Span {
        match perspective {
            Perspective::Entity => self.subject,
            Perspective::Relation => self.relation,
        }
    }

    pub fn last_position(&self) -> usize {
        self.tokens.len() - 1
    }

    /// The same prompt with `prefix` tokens prepended.
    pub fn with_prefix(&self, prefix: &[usize]) -> Self {
        let n = prefix.len();
        let mut tokens = prefix.to_vec();
        tokens.extend_from_slice(&self.tokens);
        Self {
            tokens,
            subject: self.subject.shifted(n),
            relation: self.relation.shifted(n),
            ..self.clone()
        }
    }

    /// The same prompt asking for a different answer token.
    pub fn with_answer(&self, answer: usize) -> Self {
        Self {
            answer,
            ..self.clone()
        }
    }

    pub fn check_spans(&self) -> Result<()> {
        let t = self.tokens.len();
        let (s, r) = (self.subject, self.relation);
        if s.is_empty() || r.is_empty() || s.end > t || r.end > t {
            return Err(Error::Span(format!(
                "spans {s:?} / {r:?} outside {t} tokens"
            )));
        }
        if s.start < r.end && r.start < s.end {
            return Err(Error::Span(format!(
                "subject {s:?} overlaps relation {r:?}"
            )));
        }
        let anchor = self.span(self.perspective);
        if anchor.end != t {
            return Err(Error::Span(format!(
                "{} span {anchor:?} does not end the prompt",
                self.perspective
            )));
        }
        Ok(())
    }
}

/// Train and held-out template ids for one relation and perspective.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TemplateSplit {
    pub train: Vec<usize>,
    pub held_out: Vec<usize>,
}

/// Template splits indexed by relation, then perspective.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProbeSets {
    pub entity: Vec<TemplateSplit>,
    pub relation: Vec<TemplateSplit>,
}

impl ProbeSets {
    pub fn get(&self, relation: usize, perspective: Perspective) -> &TemplateSplit {
        match perspective {
            Perspective::Entity => &self.entity[relation],
            Perspective::Relation => &self.relation[relation],
        }
    }
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

fn pseudo_word<R: Rng>(rng: &mut R) -> String {
    (0..3)
        .flat_map(|_| {
            [
                CONSONANTS[rng.random_range(0..CONSONANTS.len())] as char,
                VOWELS[rng.random_range(0..VOWELS.len())] as char,
            ]
        })
        .collect()
}

/// Generates a world. Facts are spread evenly over relations; each
/// relation draws objects from its own pool with balanced usage.
pub fn generate_world(seed: u64, config: &WorldConfig) -> Result<World> {
    let WorldConfig {
        n_entities,
        n_relations,
        n_facts,
        object_pool,
    } = *config;
    let gen = |m: String| Err(Error::Generation(m));
    if n_relations == 0 || n_entities < 2 {
        return gen(format!(
            "need ≥2 entities and ≥1 relation, got {n_entities} and {n_relations}"
        ));
    }
    if n_facts > n_entities * n_relations {
        return gen(format!(
            "{n_facts} facts cannot fit {n_entities} subjects × {n_relations} relations"
        ));
    }
    if n_facts < 2 * n_relations {
        return gen(format!(
            "{n_facts} facts leave some of {n_relations} relations with fewer than 2 facts"
        ));
    }
    if object_pool < 3 || object_pool > n_entities {
        return gen(format!(
            "object pool {object_pool} must be in 3..={n_entities}"
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let relations: Vec<Relation> = (0..n_relations)
        .map(|i| {
            let (id, templates_entity, templates_relation) = templates::templates_for(i);
            Relation {
                id,
                templates_entity,
                templates_relation,
            }
        })
        .collect();
    let reserved: HashSet<String> = template_words(&relations)?.into_iter().collect();
    let mut names = BTreeSet::new();
    let mut entities = Vec::with_capacity(n_entities);
    while entities.len() < n_entities {
        let w = pseudo_word(&mut rng);
        if !reserved.contains(&w) && names.insert(w.clone()) {
            entities.push(w);
        }
    }

    let mut facts = Vec::with_capacity(n_facts);
    let all: Vec<usize> = (0..n_entities).collect();
    for r in 0..n_relations {
        let count = n_facts / n_relations + usize::from(r < n_facts % n_relations);
        let pool: Vec<usize> = all
            .choose_multiple(&mut rng, object_pool)
            .copied()
            .collect();
        let mut subjects: Vec<usize> = all.choose_multiple(&mut rng, count).copied().collect();
        subjects.sort_unstable();
        let mut used = vec![0usize; object_pool];
        for s in subjects {
            let (slot, _) = pool
                .iter()
                .enumerate()
                .filter(|(_, &o)| o != s)
                .min_by_key(|(i, _)| (used[*i], *i))
                .expect("pool has at least two entities");
            used[slot] += 1;
            facts.push(Fact {
                s,
                r,
                o: pool[slot],
            });
        }
        let top = used.iter().max().copied().unwrap_or(0);
        if 2 * top > count {
            return gen(format!(
                "relation {r}: one object takes {top} of {count} facts"
            ));
        }
    }
    let world = World {
        seed,
        entities,
        relations,
        facts,
    };
    world.validate()?;
    Ok(world)
}

fn template_words(relations: &[Relation]) -> Result<Vec<String>> {
    let mut words = BTreeSet::new();
    for rel in relations {
        for p in Perspective::BOTH {
            for t in rel.templates(p) {
                words.extend(Template::parse(t)?.words().map(str::to_string));
            }
        }
    }
    Ok(words.into_iter().collect())
}

impl World {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Generation(m));
        let (ne, nr) = (self.entities.len(), self.relations.len());
        let mut keys = HashSet::new();
        for f in &self.facts {
            if f.s >= ne || f.o >= ne || f.r >= nr {
                return bad(format!(
                    "fact {:?} references a missing entity or relation",
                    f
                ));
            }
            if !keys.insert((f.s, f.r)) {
                return bad(format!(
                    "subject {} has two objects for relation {}",
                    f.s, f.r
                ));
            }
        }
        for rel in &self.relations {
            for p in Perspective::BOTH {
                let ts = rel.templates(p);
                for t in ts {
                    Template::parse(t)?.check_family(p)?;
                }
                let distinct: HashSet<&String> = ts.iter().collect();
                if distinct.len() != ts.len() {
                    return Err(Error::Template(format!(
                        "relation {} repeats a template",
                        rel.id
                    )));
                }
            }
        }
        self.tokenizer()?;
        Ok(())
    }

    /// Builds the word-level tokenizer over entity names and template words.
    pub fn tokenizer(&self) -> Result<Tokenizer> {
        let words = template_words(&self.relations)?;
        Tokenizer::new(
            self.entities.iter().map(String::as_str),
            words.iter().map(String::as_str),
        )
    }

    /// Objects used by a relation's facts, sorted.
    pub fn object_pool(&self, relation: usize) -> Vec<usize> {
        let set: BTreeSet<usize> = self
            .facts
            .iter()
            .filter(|f| f.r == relation)
            .map(|f| f.o)
            .collect();
        set.into_iter().collect()
    }

    /// Object of `(s, r)`, if the world states one.
    pub fn lookup(&self) -> HashMap<(usize, usize), usize> {
        self.facts.iter().map(|f| ((f.s, f.r), f.o)).collect()
    }

    pub fn verbalize(
        &self,
        tokenizer: &Tokenizer,
        fact: &Fact,
        perspective: Perspective,
        template_id: usize,
    ) -> Result<PromptInstance> {
        let rel = self
            .relations
            .get(fact.r)
            .ok_or_else(|| Error::Template(format!("no relation {}", fact.r)))?;
        let text = rel.templates(perspective).get(template_id).ok_or_else(|| {
            Error::Template(format!(
                "relation {} has no {perspective} template {template_id}",
                rel.id
            ))
        })?;
        let template = Template::parse(text)?;
        let mut tokens = Vec::with_capacity(template.pieces.len());
        for piece in &template.pieces {
            tokens.push(match piece {
                Piece::Subject => tokenizer.entity(fact.s),
                Piece::Word(w) => tokenizer.id(w).ok_or_else(|| {
                    Error::Template(format!("word {w:?} missing from vocabulary"))
                })?,
            });
        }
        let prompt = PromptInstance {
            tokens,
            subject: Span {
                start: template.subject,
                end: template.subject + 1,
            },
            relation: Span {
                start: template.relation.0,
                end: template.relation.1,
            },
            answer: tokenizer.entity(fact.o),
            perspective,
            template_id,
        };
        prompt.check_spans()?;
        Ok(prompt)
    }

    /// All but the last template of each family train; the last is held out.
    pub fn split_probe_sets(&self) -> Result<ProbeSets> {
        let split = |rel: &Relation, p: Perspective| {
            let n = rel.templates(p).len();
            if n < 3 {
                return Err(Error::Split(format!(
                    "relation {} has {n} {p} templates, need at least 3",
                    rel.id
                )));
            }
            Ok(TemplateSplit {
                train: (0..n - 1).collect(),
                held_out: vec![n - 1],
            })
        };
        Ok(ProbeSets {
            entity: self
                .relations
                .iter()
                .map(|r| split(r, Perspective::Entity))
                .collect::<Result<_>>()?,
            relation: self
                .relations
                .iter()
                .map(|r| split(r, Perspective::Relation))
                .collect::<Result<_>>()?,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let world: World = serde_json::from_str(text)?;
        world.validate()?;
        Ok(world)
    }
}
