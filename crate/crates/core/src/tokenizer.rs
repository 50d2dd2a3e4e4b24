//! Word-level tokenizer. Labels in this lab are per-word, so word tokens
//! make the label-to-token map the identity.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const MASK: u32 = 3;
pub const UNK: u32 = 4;
const FIRST_WORD_ID: u32 = 5;

/// Normalize text to the lab's canonical form: lowercase, punctuation
/// split into its own words, single spaces.
pub fn split_words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    for raw in text.split_whitespace() {
        let lower = raw.to_lowercase();
        let mut rest = lower.as_str();
        let mut trailing = Vec::new();
        // peel leading/trailing punctuation; apostrophes stay inside words
        while let Some(c) = rest.chars().next() {
            if is_punct(c) {
                words.push(c.to_string());
                rest = &rest[c.len_utf8()..];
            } else {
                break;
            }
        }
        while let Some(c) = rest.chars().last() {
            if is_punct(c) {
                trailing.push(c.to_string());
                rest = &rest[..rest.len() - c.len_utf8()];
            } else {
                break;
            }
        }
        if !rest.is_empty() {
            words.push(rest.to_string());
        }
        words.extend(trailing.into_iter().rev());
    }
    words
}

fn is_punct(c: char) -> bool {
    matches!(c, '.' | ',' | '?' | '!' | ';' | ':' | '"' | '(' | ')')
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tokenizer {
    words: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, u32>,
}

impl Tokenizer {
    /// Build a vocabulary from a text corpus. Word ids are assigned in
    /// sorted order so construction is deterministic.
    pub fn build(texts: impl IntoIterator<Item = impl AsRef<str>>) -> Self {
        let mut set = std::collections::BTreeSet::new();
        for t in texts {
            for w in split_words(t.as_ref()) {
                set.insert(w);
            }
        }
        let words: Vec<String> = set.into_iter().collect();
        let mut tok = Self { words, index: BTreeMap::new() };
        tok.rebuild_index();
        tok
    }

    pub(crate) fn rebuild_index(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), FIRST_WORD_ID + i as u32))
            .collect();
    }

    pub fn vocab_size(&self) -> usize {
        FIRST_WORD_ID as usize + self.words.len()
    }

    pub fn word_id(&self, word: &str) -> Option<u32> {
        self.index.get(&word.to_lowercase()).copied()
    }

    pub fn id_to_word(&self, id: u32) -> Option<&str> {
        match id {
            PAD => Some("<pad>"),
            BOS => Some("<bos>"),
            EOS => Some("<eos>"),
            MASK => Some("<mask>"),
            UNK => Some("<unk>"),
            _ => self.words.get((id - FIRST_WORD_ID) as usize).map(|s| s.as_str()),
        }
    }

    /// Unknown words map to UNK; nothing fails.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        split_words(text)
            .iter()
            .map(|w| self.index.get(w).copied().unwrap_or(UNK))
            .collect()
    }

    /// Inverse of encode for in-vocabulary normalized text. Special tokens
    /// other than UNK are dropped.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut parts = Vec::new();
        for &id in ids {
            match id {
                PAD | BOS | EOS | MASK => {}
                UNK => parts.push("<unk>".to_string()),
                _ => {
                    if let Some(w) = self.words.get((id - FIRST_WORD_ID) as usize) {
                        parts.push(w.clone());
                    }
                }
            }
        }
        parts.join(" ")
    }
}
