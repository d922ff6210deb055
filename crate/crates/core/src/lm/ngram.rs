use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::{DebiasError, Result};

const BOS: &str = "<s>";
const EOS: &str = "</s>";
const UNK: &str = "<unk>";

/// Add-k smoothed word n-gram model. Contexts are left-padded with `<s>`;
/// every text ends with `</s>`; unseen words map to `<unk>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NGramLm {
    order: usize,
    k: f64,
    vocab: BTreeMap<String, u32>,
    #[serde(skip)]
    counts: HashMap<Vec<u32>, (HashMap<u32, u64>, u64)>,
}

fn padded(ids: Vec<u32>, order: usize, bos: u32, eos: u32) -> Vec<u32> {
    let mut s = vec![bos; order - 1];
    s.extend(ids);
    s.push(eos);
    s
}

impl NGramLm {
    /// A model with no counts, hence uniform over its vocabulary.
    pub fn uniform<'a>(words: impl IntoIterator<Item = &'a str>, order: usize, k: f64) -> Result<Self> {
        if order < 1 {
            return Err(DebiasError::InvalidInput("n-gram order must be >= 1".into()));
        }
        let mut vocab = BTreeMap::new();
        for w in words.into_iter().chain([EOS, UNK]) {
            let n = vocab.len() as u32;
            vocab.entry(w.to_string()).or_insert(n);
        }
        Ok(Self {
            order,
            k,
            vocab,
            counts: HashMap::new(),
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn id(&self, w: &str) -> u32 {
        self.vocab.get(w).copied().unwrap_or(self.vocab[UNK])
    }

    fn bos(&self) -> u32 {
        // Never predicted, so it sits outside the vocabulary.
        u32::MAX
    }

    fn encode(&self, text: &str) -> Vec<u32> {
        let ids = text.split_whitespace().map(|w| self.id(w)).collect();
        padded(ids, self.order, self.bos(), self.vocab[EOS])
    }

    fn prob_ids(&self, context: &[u32], w: u32) -> f64 {
        let v = self.vocab.len() as f64;
        let (c, total) = match self.counts.get(context) {
            Some((m, t)) => (m.get(&w).copied().unwrap_or(0) as f64, *t as f64),
            None => (0.0, 0.0),
        };
        let denom = total + self.k * v;
        if denom > 0.0 {
            (c + self.k) / denom
        } else {
            1.0 / v
        }
    }

    /// P(word | context), with `context` holding the previous `order - 1`
    /// words (use `<s>` for padding).
    pub fn prob(&self, context: &[&str], word: &str) -> f64 {
        let ctx: Vec<u32> = context
            .iter()
            .map(|w| if *w == BOS { self.bos() } else { self.id(w) })
            .collect();
        self.prob_ids(&ctx, self.id(word))
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.vocab.keys().map(String::as_str)
    }

    fn text_nll(&self, text: &str) -> (f64, usize) {
        let s = self.encode(text);
        let n = self.order;
        let mut nll = 0.0;
        for win in s.windows(n) {
            nll -= self.prob_ids(&win[..n - 1], win[n - 1]).ln();
        }
        (nll, s.len() + 1 - n)
    }
}

pub fn train_ngram<S: AsRef<str>>(texts: &[S], order: usize, k: f64) -> Result<NGramLm> {
    if texts.is_empty() {
        return Err(DebiasError::InvalidInput("n-gram training needs at least one text".into()));
    }
    if !(k >= 0.0 && k.is_finite()) {
        return Err(DebiasError::InvalidInput("n-gram smoothing constant must be >= 0".into()));
    }
    let mut words: Vec<&str> = texts.iter().flat_map(|t| t.as_ref().split_whitespace()).collect();
    words.sort_unstable();
    words.dedup();
    let mut lm = NGramLm::uniform(words, order, k)?;
    for t in texts {
        let s = lm.encode(t.as_ref());
        for win in s.windows(order) {
            let e = lm.counts.entry(win[..order - 1].to_vec()).or_default();
            *e.0.entry(win[order - 1]).or_insert(0) += 1;
            e.1 += 1;
        }
    }
    Ok(lm)
}

/// exp of the mean per-token negative log-likelihood, `</s>` included.
pub fn perplexity<S: AsRef<str>>(lm: &NGramLm, texts: &[S]) -> Result<f64> {
    if texts.is_empty() {
        return Err(DebiasError::InvalidInput("perplexity of an empty text set".into()));
    }
    let (mut nll, mut n) = (0.0, 0usize);
    for t in texts {
        let (a, b) = lm.text_nll(t.as_ref());
        nll += a;
        n += b;
    }
    Ok((nll / n as f64).exp())
}
