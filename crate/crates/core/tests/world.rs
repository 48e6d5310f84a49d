// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{HashMap, HashSet};

use kloc::world::{generate_world, Fact, Perspective, Relation, World, WorldConfig};
use kloc::Error;

fn default_world() -> World {
    generate_world(7, &WorldConfig::default()).unwrap()
}

#[test]
fn generation_is_deterministic() {
    assert_eq!(default_world(), default_world());
    assert_ne!(
        default_world(),
        generate_world(8, &WorldConfig::default()).unwrap()
    );
}

#[test]
fn default_counts_and_functionality() {
    let w = default_world();
    assert_eq!(w.entities.len(), 50);
    assert_eq!(w.relations.len(), 10);
    let keys: HashSet<(usize, usize)> = w.facts.iter().map(|f| (f.s, f.r)).collect();
    assert_eq!(keys.len(), 300);
    assert_eq!(w.facts.len(), 300);
}

#[test]
fn objects_are_balanced_per_relation() {
    let w = default_world();
    for r in 0..w.relations.len() {
        let facts: Vec<&Fact> = w.facts.iter().filter(|f| f.r == r).collect();
        assert!(facts.len() >= 2);
        let mut counts: HashMap<usize, usize> = HashMap::new();
        for f in &facts {
            assert_ne!(f.s, f.o);
            *counts.entry(f.o).or_default() += 1;
        }
        let top = counts.values().max().unwrap();
        assert!(
            2 * top <= facts.len(),
            "relation {r}: {top} of {}",
            facts.len()
        );
    }
}

#[test]
fn pigeonhole_and_degenerate_requests_fail() {
    let too_many = WorldConfig {
        n_entities: 5,
        n_relations: 2,
        n_facts: 11,
        object_pool: 3,
    };
    assert!(matches!(
        generate_world(1, &too_many),
        Err(Error::Generation(_))
    ));
    let too_few = WorldConfig {
        n_facts: 3,
        ..too_many
    };
    assert!(generate_world(1, &too_few).is_err());
}

fn france_world() -> World {
    World {
        seed: 0,
        entities: vec![
            "France".into(),
            "Paris".into(),
            "Spain".into(),
            "Madrid".into(),
        ],
        relations: vec![Relation {
            id: "capital".into(),
            templates_entity: vec![
                "[the capital city of] {s}".into(),
                "[name the capital of] {s}".into(),
                "[the capital of] {s}".into(),
            ],
            templates_relation: vec![
                "{s} [ 's capital city is]".into(),
                "{s} [has its capital in]".into(),
                "{s} [ 's capital is]".into(),
            ],
        }],
        facts: vec![Fact { s: 0, r: 0, o: 1 }, Fact { s: 2, r: 0, o: 3 }],
    }
}

#[test]
fn verbalize_fixture() {
    let w = france_world();
    w.validate().unwrap();
    let tok = w.tokenizer().unwrap();
    let p = w
        .verbalize(&tok, &w.facts[0], Perspective::Relation, 0)
        .unwrap();
    assert_eq!(tok.decode(&p.tokens).unwrap(), "France 's capital city is");
    assert_eq!(
        tok.decode(&p.tokens[p.relation.start..p.relation.end])
            .unwrap(),
        "'s capital city is"
    );
    assert_eq!(
        tok.decode(&p.tokens[p.subject.start..p.subject.end])
            .unwrap(),
        "France"
    );
    assert_eq!(tok.word(p.answer).unwrap(), "Paris");

    let q = w
        .verbalize(&tok, &w.facts[0], Perspective::Relation, 1)
        .unwrap();
    assert_eq!(p.answer, q.answer);
    assert_ne!(p.tokens, q.tokens);

    let e = w
        .verbalize(&tok, &w.facts[0], Perspective::Entity, 0)
        .unwrap();
    assert_eq!(tok.decode(&e.tokens).unwrap(), "the capital city of France");
    assert_eq!(e.subject.end, e.tokens.len());

    assert!(matches!(
        w.verbalize(&tok, &w.facts[0], Perspective::Entity, 3),
        Err(Error::Template(_))
    ));
}

#[test]
fn every_prompt_satisfies_span_invariants() {
    let w = default_world();
    let tok = w.tokenizer().unwrap();
    for fact in &w.facts {
        let rel = &w.relations[fact.r];
        for p in Perspective::BOTH {
            for (t, text) in rel.templates(p).iter().enumerate() {
                let prompt = w.verbalize(&tok, fact, p, t).unwrap();
                prompt.check_spans().unwrap();
                let decoded = tok.decode(&prompt.tokens).unwrap();
                assert_eq!(tok.encode(&decoded), prompt.tokens);
                let subj = tok
                    .decode(&prompt.tokens[prompt.subject.start..prompt.subject.end])
                    .unwrap();
                assert_eq!(subj, w.entities[fact.s]);
                let phrase = text[text.find('[').unwrap() + 1..text.find(']').unwrap()]
                    .split_whitespace()
                    .collect::<Vec<_>>()
                    .join(" ");
                let rel_text = tok
                    .decode(&prompt.tokens[prompt.relation.start..prompt.relation.end])
                    .unwrap();
                assert_eq!(rel_text, phrase);
                assert_eq!(prompt.span(p).end, prompt.tokens.len());
            }
        }
    }
}

#[test]
fn split_is_two_plus_one_and_disjoint() {
    let w = default_world();
    let sets = w.split_probe_sets().unwrap();
    let mut coverage = 0;
    for r in 0..w.relations.len() {
        for p in Perspective::BOTH {
            let s = sets.get(r, p);
            assert_eq!(s.train.len(), 2);
            assert_eq!(s.held_out.len(), 1);
            assert!(s.train.iter().all(|t| !s.held_out.contains(t)));
        }
        coverage += w.facts.iter().filter(|f| f.r == r).count()
            * sets.get(r, Perspective::Entity).held_out.len();
    }
    // one held-out entity prompt per fact
    assert_eq!(coverage, w.facts.len());

    let mut short = france_world();
    short.relations[0].templates_entity.pop();
    assert!(matches!(short.split_probe_sets(), Err(Error::Split(_))));
}

#[test]
fn json_round_trip_and_schema() {
    let w = default_world();
    let text = w.to_json().unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(v["seed"].is_u64());
    assert!(v["entities"].is_array());
    assert!(v["relations"][0]["templates_entity"].is_array());
    assert!(v["relations"][0]["templates_relation"].is_array());
    assert_eq!(v["facts"][0].as_array().unwrap().len(), 3);
    assert_eq!(World::from_json(&text).unwrap(), w);
}

#[test]
fn invalid_world_rejected() {
    let mut w = france_world();
    w.facts.push(Fact { s: 0, r: 0, o: 3 });
    assert!(w.validate().is_err());
    let mut w = france_world();
    w.facts.push(Fact { s: 9, r: 0, o: 3 });
    assert!(w.validate().is_err());
}

#[test]
fn prefix_shifts_spans() {
    let w = france_world();
    let tok = w.tokenizer().unwrap();
    let p = w
        .verbalize(&tok, &w.facts[1], Perspective::Relation, 0)
        .unwrap();
    let q = p.with_prefix(&[5, 6]);
    assert_eq!(q.tokens.len(), p.tokens.len() + 2);
    assert_eq!(q.subject.start, p.subject.start + 2);
    q.check_spans().unwrap();
}
