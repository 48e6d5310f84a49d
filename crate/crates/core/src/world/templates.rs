// SPDX-License-Identifier: MIT OR Apache-2.0

//! Template syntax and the built-in relation bank.
//!
//! A template is a whitespace-separated word list containing exactly one
//! `{s}` subject slot and one bracketed relation phrase, e.g.
//! `"{s} [ 's capital city is]"` or `"[the capital city of] {s}"`.
//! Entity-perspective templates end with the subject; relation-perspective
//! templates end with the relation phrase.

use super::Perspective;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Piece {
    Subject,
    Word(String),
}

/// A parsed template: its pieces and the half-open piece range of the
/// relation phrase.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub pieces: Vec<Piece>,
    pub relation: (usize, usize),
    pub subject: usize,
}

impl Template {
    pub fn parse(text: &str) -> Result<Self> {
        let err = |m: &str| Err(Error::Template(format!("{m} in {text:?}")));
        let mut pieces = Vec::new();
        let mut open = None;
        let mut relation = None;
        let mut subject = None;
        for raw in text.split_whitespace() {
            let mut word = raw;
            let opens = word.starts_with('[');
            if opens {
                if open.is_some() || relation.is_some() {
                    return err("more than one relation phrase");
                }
                open = Some(pieces.len());
                word = &word[1..];
            }
            let closes = word.ends_with(']');
            if closes {
                word = &word[..word.len() - 1];
            }
            if word.is_empty() {
                // a lone "[" or "]" marks a boundary without adding a word
            } else if word == "{s}" {
                if subject.is_some() {
                    return err("more than one subject slot");
                }
                if open.is_some() {
                    return err("subject slot inside relation phrase");
                }
                subject = Some(pieces.len());
                pieces.push(Piece::Subject);
            } else if word.contains(['[', ']', '{', '}']) {
                return err("stray bracket");
            } else {
                pieces.push(Piece::Word(word.to_string()));
            }
            if closes {
                let start = open
                    .take()
                    .ok_or_else(|| Error::Template(format!("unopened ']' in {text:?}")))?;
                if start == pieces.len() {
                    return err("empty relation phrase");
                }
                relation = Some((start, pieces.len()));
            }
        }
        if open.is_some() {
            return err("unclosed '['");
        }
        let subject = match subject {
            Some(s) => s,
            None => return err("missing {s}"),
        };
        let relation = match relation {
            Some(r) => r,
            None => return err("missing relation phrase"),
        };
        Ok(Self {
            pieces,
            relation,
            subject,
        })
    }

    /// Checks the family rule: entity templates end with the subject,
    /// relation templates end with the relation phrase.
    pub fn check_family(&self, perspective: Perspective) -> Result<()> {
        let last = self.pieces.len() - 1;
        let ok = match perspective {
            Perspective::Entity => self.subject == last,
            Perspective::Relation => self.relation.1 == last + 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Template(format!(
                "{} template must end with its {}",
                perspective.as_str(),
                match perspective {
                    Perspective::Entity => "subject",
                    Perspective::Relation => "relation phrase",
                }
            )))
        }
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.pieces.iter().filter_map(|p| match p {
            Piece::Word(w) => Some(w.as_str()),
            Piece::Subject => None,
        })
    }
}

/// `(id, entity templates, relation templates)`; the last template of each
/// family is the held-out paraphrase.
pub(crate) const BANK: &[(&str, [&str; 3], [&str; 3])] = &[
    (
        "capital",
        [
            "[the capital city of] {s}",
            "[name the capital of] {s}",
            "[the capital of] {s}",
        ],
        [
            "{s} [ 's capital city is]",
            "{s} [has its capital in]",
            "{s} [ 's capital is]",
        ],
    ),
    (
        "founder",
        [
            "[the founder of] {s}",
            "[the person who founded] {s}",
            "[who founded] {s}",
        ],
        [
            "{s} [was founded by]",
            "{s} [has as its founder]",
            "{s} [ 's founder is]",
        ],
    ),
    (
        "language",
        [
            "[the language spoken in] {s}",
            "[the main language of] {s}",
            "[the language of] {s}",
        ],
        [
            "{s} [speaks the language]",
            "{s} [ 's main language is]",
            "{s} [ 's language is]",
        ],
    ),
    (
        "currency",
        [
            "[the currency used in] {s}",
            "[the money of] {s}",
            "[the currency of] {s}",
        ],
        [
            "{s} [pays with the currency]",
            "{s} [uses the money]",
            "{s} [ 's currency is]",
        ],
    ),
    (
        "neighbor",
        [
            "[the neighbor of] {s}",
            "[the country next to] {s}",
            "[the nearest neighbor of] {s}",
        ],
        [
            "{s} [borders on]",
            "{s} [is a neighbor of]",
            "{s} [ 's neighbor is]",
        ],
    ),
    (
        "leader",
        [
            "[the leader of] {s}",
            "[the head of] {s}",
            "[who leads] {s}",
        ],
        [
            "{s} [is led by]",
            "{s} [has as its leader]",
            "{s} [ 's leader is]",
        ],
    ),
    (
        "river",
        [
            "[the river that flows through] {s}",
            "[the longest river of] {s}",
            "[the river of] {s}",
        ],
        [
            "{s} [lies on the river]",
            "{s} [has the river]",
            "{s} [ 's river is]",
        ],
    ),
    (
        "sport",
        [
            "[the national sport of] {s}",
            "[the favorite sport in] {s}",
            "[the sport of] {s}",
        ],
        [
            "{s} [loves to play]",
            "{s} [plays the sport]",
            "{s} [ 's sport is]",
        ],
    ),
    (
        "religion",
        [
            "[the faith followed in] {s}",
            "[the main religion of] {s}",
            "[the religion of] {s}",
        ],
        [
            "{s} [follows the religion]",
            "{s} [believes in the faith]",
            "{s} [ 's religion is]",
        ],
    ),
    (
        "ally",
        [
            "[the closest ally of] {s}",
            "[the partner of] {s}",
            "[the ally of] {s}",
        ],
        [
            "{s} [is allied with]",
            "{s} [has the partner]",
            "{s} [ 's ally is]",
        ],
    ),
    (
        "mascot",
        [
            "[the mascot of] {s}",
            "[the animal symbol of] {s}",
            "[the symbol of] {s}",
        ],
        [
            "{s} [is represented by]",
            "{s} [has as its mascot]",
            "{s} [ 's mascot is]",
        ],
    ),
    (
        "composer",
        [
            "[the anthem composer of] {s}",
            "[who wrote the anthem of] {s}",
            "[the composer of] {s}",
        ],
        [
            "{s} [had its anthem written by]",
            "{s} [sings the anthem by]",
            "{s} [ 's composer is]",
        ],
    ),
];

/// Templates for relation `index`; bank entries first, then synthesized
/// ones built around a numbered attribute word.
pub(crate) fn templates_for(index: usize) -> (String, Vec<String>, Vec<String>) {
    if let Some((id, ent, rel)) = BANK.get(index) {
        return (
            id.to_string(),
            ent.iter().map(|s| s.to_string()).collect(),
            rel.iter().map(|s| s.to_string()).collect(),
        );
    }
    let w = format!("trait{index}");
    (
        w.clone(),
        vec![
            format!("[the {w} of] {{s}}"),
            format!("[what is the {w} of] {{s}}"),
            format!("[the known {w} of] {{s}}"),
        ],
        vec![
            format!("{{s}} [ 's {w} is]"),
            format!("{{s}} [has the {w}]"),
            format!("{{s}} [ 's known {w} is]"),
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_relation_template() {
        let t = Template::parse("{s} [ 's capital city is]").unwrap();
        assert_eq!(t.subject, 0);
        assert_eq!(t.relation, (1, 5));
        assert_eq!(
            t.words().collect::<Vec<_>>(),
            ["'s", "capital", "city", "is"]
        );
        t.check_family(Perspective::Relation).unwrap();
        assert!(t.check_family(Perspective::Entity).is_err());
    }

    #[test]
    fn parse_entity_template() {
        let t = Template::parse("[the capital city of] {s}").unwrap();
        assert_eq!(t.relation, (0, 4));
        assert_eq!(t.subject, 4);
        t.check_family(Perspective::Entity).unwrap();
    }

    #[test]
    fn malformed_templates() {
        for bad in [
            "the capital of {s}",
            "[the capital of {s}]",
            "[a] [b] {s}",
            "[the capital of] {s} {s}",
            "[] {s}",
            "[the capital of {s}",
            "[x] y",
        ] {
            assert!(
                matches!(Template::parse(bad), Err(Error::Template(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn bank_is_well_formed() {
        for i in 0..BANK.len() + 3 {
            let (_, ent, rel) = templates_for(i);
            for t in &ent {
                Template::parse(t)
                    .unwrap()
                    .check_family(Perspective::Entity)
                    .unwrap();
            }
            for t in &rel {
                Template::parse(t)
                    .unwrap()
                    .check_family(Perspective::Relation)
                    .unwrap();
            }
            let mut all: Vec<_> = ent.iter().chain(&rel).collect();
            all.sort();
            all.dedup();
            assert_eq!(all.len(), 6);
        }
    }
}
