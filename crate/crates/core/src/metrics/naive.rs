use std::collections::{BTreeMap, BTreeSet};

use autodiff::Tensor;

use crate::corpus::{TokenId, Vocab};
use crate::{DebiasError, Result};

/// Word-swap baseline: every bias word is replaced by its nearest
/// non-bias word under cosine similarity of the embedding rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NaiveSwap {
    replacements: BTreeMap<TokenId, TokenId>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

impl NaiveSwap {
    /// `embeddings` is `[vocab, width]`; reserved ids never serve as
    /// replacements. Ties go to the lower id.
    pub fn new(embeddings: &Tensor, bias_ids: &[TokenId]) -> Result<Self> {
        let v = embeddings.rows();
        let bias: BTreeSet<TokenId> = bias_ids.iter().copied().collect();
        if let Some(&bad) = bias.iter().find(|&&i| i >= v) {
            return Err(DebiasError::InvalidInput(format!("bias word id {bad} outside the embedding table")));
        }
        let candidates: Vec<TokenId> = (0..v).filter(|i| !Vocab::is_reserved(*i) && !bias.contains(i)).collect();
        if candidates.is_empty() && !bias.is_empty() {
            return Err(DebiasError::InvalidInput("no non-bias words to swap in".into()));
        }
        let mut replacements = BTreeMap::new();
        for &b in &bias {
            let eb = embeddings.row(b);
            let mut best = candidates[0];
            let mut best_sim = f64::NEG_INFINITY;
            for &c in &candidates {
                let s = cosine(eb, embeddings.row(c));
                if s > best_sim {
                    best_sim = s;
                    best = c;
                }
            }
            replacements.insert(b, best);
        }
        Ok(Self { replacements })
    }

    pub fn replacement(&self, id: TokenId) -> Option<TokenId> {
        self.replacements.get(&id).copied()
    }

    pub fn apply(&self, tokens: &[TokenId]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.replacement(*t).unwrap_or(*t)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn swaps_only_bias_words_to_nearest_non_bias() {
        // ids 0..3 reserved; 3 and 4 are bias words.
        let rows = vec![
            [0.0, 1.0], [0.0, 1.0], [0.0, 1.0],
            [1.0, 0.1], [-1.0, 0.0],
            [0.9, 0.2], [-0.7, -0.1], [0.0, 1.0],
        ];
        let t = Tensor::matrix(8, 2, rows.concat()).unwrap();
        let swap = NaiveSwap::new(&t, &[3, 4]).unwrap();
        assert_eq!(swap.apply(&[7, 3, 5, 4]), vec![7, 5, 5, 6]);
        assert_eq!(swap.apply(&[5, 6, 7]), vec![5, 6, 7]);
    }
}
