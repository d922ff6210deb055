//! Corpus construction: the attribute registry, the planted-bias synthetic
//! corpus, tokenization, dataset splits, and class-skewed lexicon extraction.

mod io;
mod registry;
mod split;
mod synthetic;
mod tfidf;
mod vocab;

use serde::{Deserialize, Serialize};

pub use io::{read_corpus_tsv, write_corpus_tsv};
pub use registry::{fill_prompt, Attribute, AttributeRegistry, OptionSpec, Prompt, Template, TemplateTag, PLACEHOLDERS};
pub use split::{split_dataset, SplitRatios};
pub use synthetic::{generate_synthetic_corpus, MarkerSet, SyntheticCorpusConfig};
pub use tfidf::{extract_bias_words, tfidf_scores, BiasWords};
pub use vocab::{TokenId, Vocab, EOT_ID, PAD_ID, UNK_ID};

/// Ideology class. Class index 1 is conservative throughout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    L,
    C,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::L => 0,
            Label::C => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Label::L
        } else {
            Label::C
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Label::L => Label::C,
            Label::C => Label::L,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::L => "L",
            Label::C => "C",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "L" => Some(Label::L),
            "C" => Some(Label::C),
            _ => None,
        }
    }
}

/// A labeled document in surface form (one corpus TSV line).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledText {
    pub label: Label,
    pub text: String,
}

/// A tokenized labeled document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub tokens: Vec<TokenId>,
    pub label: Label,
}

impl Document {
    pub fn encode(doc: &LabeledText, vocab: &Vocab, max_len: usize) -> crate::Result<Self> {
        let mut tokens = vocab.tokenize(&doc.text);
        tokens.truncate(max_len);
        if tokens.is_empty() {
            return Err(crate::DebiasError::Corpus("empty document".into()));
        }
        Ok(Self {
            tokens,
            label: doc.label,
        })
    }
}

pub fn encode_all(docs: &[LabeledText], vocab: &Vocab, max_len: usize) -> crate::Result<Vec<Document>> {
    docs.iter().map(|d| Document::encode(d, vocab, max_len)).collect()
}
