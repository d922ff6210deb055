use std::collections::{BTreeSet, HashMap};

use crate::{DebiasError, Result};

pub type TokenId = usize;

pub const PAD_ID: TokenId = 0;
pub const UNK_ID: TokenId = 1;
pub const EOT_ID: TokenId = 2;

const RESERVED: [&str; 3] = ["<pad>", "<unk>", "<eot>"];

/// Word-level vocabulary over whitespace-delimited tokens.
///
/// Ids `0..3` are reserved; the remaining words are assigned in sorted order,
/// so the mapping depends only on the set of words seen.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for t in texts {
            for w in t.split_whitespace() {
                set.insert(w.to_string());
            }
        }
        if set.is_empty() {
            return Err(DebiasError::Corpus("cannot build a vocabulary from an empty corpus".into()));
        }
        Ok(Self::from_words(set.into_iter().filter(|w| !RESERVED.contains(&w.as_str()))))
    }

    /// Vocabulary with the reserved entries followed by `words` in order.
    pub fn from_words(words: impl IntoIterator<Item = String>) -> Self {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(words);
        let index = all.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words: all, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn is_reserved(id: TokenId) -> bool {
        id < RESERVED.len()
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace()
            .map(|w| self.id(w).unwrap_or(UNK_ID))
            .collect()
    }

    /// Joins tokens with single spaces; the end-of-text marker is dropped.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&id| id != EOT_ID && id != PAD_ID)
            .map(|&id| self.word(id).unwrap_or(RESERVED[UNK_ID]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One word per line, reserved entries included.
    pub fn to_lines(&self) -> String {
        let mut s = self.words.join("\n");
        s.push('\n');
        s
    }

    pub fn from_lines(text: &str) -> Result<Self> {
        let words: Vec<&str> = text.lines().collect();
        if words.len() < RESERVED.len() || words[..RESERVED.len()] != RESERVED {
            return Err(DebiasError::Corpus("vocabulary file lacks reserved header".into()));
        }
        Ok(Self::from_words(
            words[RESERVED.len()..].iter().map(|w| w.to_string()),
        ))
    }
}
