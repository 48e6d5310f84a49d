// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeSet, HashMap};

use rand::Rng;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;

/// One token per whitespace-separated word.
///
/// Ids: `<pad>`, `<unk>`, then the given entity names in order, then the
/// remaining words sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, usize>,
    first_entity: usize,
    n_entities: usize,
}

impl Tokenizer {
    pub fn new<'a>(
        entities: impl IntoIterator<Item = &'a str>,
        other_words: impl IntoIterator<Item = &'a str>,
    ) -> Result<Self> {
        let mut words = vec!["<pad>".to_string(), "<unk>".to_string()];
        let mut index: HashMap<String, usize> = words.iter().cloned().zip(0..).collect();
        for e in entities {
            if index.insert(e.to_string(), words.len()).is_some() {
                return Err(Error::Generation(format!("duplicate entity name {e:?}")));
            }
            words.push(e.to_string());
        }
        let n_entities = words.len() - 2;
        let rest: BTreeSet<&str> = other_words.into_iter().collect();
        for w in rest {
            if index.contains_key(w) {
                if (2..2 + n_entities).contains(&index[w]) {
                    return Err(Error::Generation(format!(
                        "entity name {w:?} collides with a template word"
                    )));
                }
                continue;
            }
            index.insert(w.to_string(), words.len());
            words.push(w.to_string());
        }
        Ok(Self {
            words,
            index,
            first_entity: 2,
            n_entities,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Token id of entity `e`.
    pub fn entity(&self, e: usize) -> usize {
        self.first_entity + e
    }

    /// Entity index of a token, if it is one.
    pub fn entity_of(&self, token: usize) -> Option<usize> {
        (self.first_entity..self.first_entity + self.n_entities)
            .contains(&token)
            .then(|| token - self.first_entity)
    }

    pub fn word(&self, id: usize) -> Result<&str> {
        self.words
            .get(id)
            .map(String::as_str)
            .ok_or(Error::Vocabulary {
                token: id,
                vocab: self.words.len(),
            })
    }

    /// Unknown words map to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let words = ids
            .iter()
            .map(|&i| self.word(i))
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }

    /// `0..=max_len` uniformly random non-reserved tokens.
    pub fn random_prefix<R: Rng + ?Sized>(&self, rng: &mut R, max_len: usize) -> Vec<usize> {
        let n = rng.random_range(0..=max_len);
        (0..n)
            .map(|_| rng.random_range(2..self.words.len()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_round_trip() {
        let t = Tokenizer::new(["zorva", "kipel"], ["is", "'s", "capital", "is"]).unwrap();
        assert_eq!(t.vocab_size(), 2 + 2 + 3);
        assert_eq!(t.entity(1), 3);
        assert_eq!(t.entity_of(3), Some(1));
        assert_eq!(t.entity_of(4), None);
        let text = "zorva 's capital is kipel";
        assert_eq!(t.decode(&t.encode(text)).unwrap(), text);
        assert_eq!(t.encode("zorva unknownword"), vec![2, UNK]);
        assert!(t.decode(&[99]).is_err());
    }

    #[test]
    fn collisions_rejected() {
        assert!(Tokenizer::new(["is"], ["is"]).is_err());
        assert!(Tokenizer::new(["a", "a"], []).is_err());
    }
}
