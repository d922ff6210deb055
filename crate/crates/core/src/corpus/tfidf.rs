use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Document, Label, TokenId, Vocab};
use crate::{DebiasError, Result};

/// Class-skewed lexicons, most skewed first.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BiasWords {
    pub liberal: Vec<String>,
    pub conservative: Vec<String>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// Per-word class skew: mean TF-IDF over L documents minus mean over C
/// documents, with `tf = count / len` and `idf = ln(N / (1 + df)) + 1`.
pub fn tfidf_scores(docs: &[Document]) -> HashMap<TokenId, f64> {
    let n = docs.len() as f64;
    let mut df: HashMap<TokenId, usize> = HashMap::new();
    let mut counts: Vec<HashMap<TokenId, usize>> = Vec::with_capacity(docs.len());
    for d in docs {
        let mut c: HashMap<TokenId, usize> = HashMap::new();
        for &t in &d.tokens {
            if !Vocab::is_reserved(t) {
                *c.entry(t).or_default() += 1;
            }
        }
        for &t in c.keys() {
            *df.entry(t).or_default() += 1;
        }
        counts.push(c);
    }
    let class_sizes = [Label::L, Label::C].map(|l| docs.iter().filter(|d| d.label == l).count() as f64);
    let mut sums: HashMap<TokenId, [f64; 2]> = HashMap::new();
    for (d, c) in docs.iter().zip(&counts) {
        let len = d.tokens.len() as f64;
        // Sorted so the floating-point accumulation order is reproducible.
        let mut entries: Vec<_> = c.iter().collect();
        entries.sort_unstable();
        for (&t, &k) in entries {
            let idf = (n / (1.0 + df[&t] as f64)).ln() + 1.0;
            sums.entry(t).or_default()[d.label.index()] += (k as f64 / len) * idf;
        }
    }
    sums.into_iter()
        .map(|(t, [l, c])| (t, l / class_sizes[0] - c / class_sizes[1]))
        .collect()
}

/// Top-`k` most L-skewed and most C-skewed words.
///
/// Words with zero skew are in neither list. When fewer than `k` skewed
/// words exist the lists are shorter and a warning is recorded.
pub fn extract_bias_words(docs: &[Document], vocab: &Vocab, k: usize) -> Result<BiasWords> {
    if k == 0 {
        return Err(DebiasError::InvalidInput("bias word count must be at least 1".into()));
    }
    for l in [Label::L, Label::C] {
        if !docs.iter().any(|d| d.label == l) {
            return Err(DebiasError::Corpus(format!("no {} documents for bias word extraction", l.as_str())));
        }
    }
    let scores = tfidf_scores(docs);
    let mut ranked: Vec<(&str, f64)> = scores
        .iter()
        .filter(|(_, &s)| s != 0.0)
        .filter_map(|(&t, &s)| vocab.word(t).map(|w| (w, s)))
        .collect();
    // Rank by magnitude with a label-agnostic tie-break, so swapping the
    // classes swaps the two lists exactly.
    ranked.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()).then_with(|| a.0.cmp(b.0)));
    let pick = |positive: bool| -> Vec<String> {
        ranked
            .iter()
            .filter(|(_, s)| (*s > 0.0) == positive)
            .take(k)
            .map(|(w, _)| w.to_string())
            .collect()
    };
    let liberal = pick(true);
    let conservative = pick(false);
    let mut warnings = Vec::new();
    for (name, list) in [("liberal", &liberal), ("conservative", &conservative)] {
        if list.len() < k {
            warnings.push(format!("only {} {name} skewed words available (requested {k})", list.len()));
        }
    }
    Ok(BiasWords {
        liberal,
        conservative,
        warnings,
    })
}
