//! Closed word-level vocabulary over the caption/question templates.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::{CoreError, Result};

use super::{COLOR_NAMES, SHAPE_NAMES, SIZE_NAMES};

const TEMPLATE_WORDS: [&str; 9] = ["a", "scene", "with", "and", "what", "color", "is", "the", "?"];

/// Whitespace tokenizer over a fixed template vocabulary. Word-piece
/// splitting buys nothing here because the vocabulary is closed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut tokens: Vec<String> = Vec::new();
        for w in TEMPLATE_WORDS {
            tokens.push(w.to_string());
        }
        for w in SHAPE_NAMES.iter().chain(&COLOR_NAMES).chain(&SIZE_NAMES) {
            tokens.push(w.to_string());
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }

    /// Rebuild the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| CoreError::Data(format!("word `{word}` not in the closed vocabulary")))
    }

    pub fn word(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.word(i)).collect::<Vec<_>>().join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_closure() {
        let v = Vocabulary::new();
        let ids = v.encode("what color is the small red circle ?").unwrap();
        assert!(ids.iter().all(|&i| i < v.len()));
        assert_eq!(v.decode(&ids), "what color is the small red circle ?");
    }

    #[test]
    fn unknown_word_is_a_data_error() {
        let v = Vocabulary::new();
        assert!(v.encode("what color is the dragon ?").is_err());
    }
}
