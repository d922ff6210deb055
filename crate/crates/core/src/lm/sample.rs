use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{softmax, TransformerLm};
use crate::corpus::{TokenId, EOT_ID};
use crate::{DebiasError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    /// Number of most probable tokens kept; 1 is greedy decoding.
    pub top_k: usize,
    pub temperature: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            top_k: 40,
            temperature: 1.0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.top_k == 0 {
            errs.push("decode.top_k must be >= 1".to_string());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            errs.push("decode.temperature must be positive".to_string());
        }
        errs
    }
}

/// One uniform draw per emitted token, from a seeded stream.
#[derive(Debug, Clone)]
pub struct StepSampler {
    rng: ChaCha8Rng,
}

impl StepSampler {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_uniform(&mut self) -> f64 {
        self.rng.gen_range(0.0..1.0)
    }
}

/// Inverse-CDF sample from the `top_k` most probable entries of `probs`,
/// sharpened by `temperature`. Candidates are selected by probability
/// descending, ties by index, so `top_k = 1` is the argmax. The CDF walks the
/// candidates in index order: two nearby distributions fed the same `u` then
/// disagree with probability on the order of their total variation distance.
pub fn sample_top_k(probs: &[f64], top_k: usize, temperature: f64, u: f64) -> usize {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    let k = top_k.clamp(1, probs.len().max(1));
    let cmp = |a: &usize, b: &usize| probs[*b].total_cmp(&probs[*a]).then(a.cmp(b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    if k == 1 {
        return idx[0];
    }
    idx.sort_unstable();
    let inv_t = 1.0 / temperature;
    let weights: Vec<f64> = idx.iter().map(|&i| probs[i].max(0.0).powf(inv_t)).collect();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return idx.iter().copied().min_by(cmp).expect("k >= 1");
    }
    let target = u * total;
    let mut acc = 0.0;
    for (w, &i) in weights.iter().zip(&idx) {
        acc += w;
        if target < acc {
            return i;
        }
    }
    *idx.last().expect("k >= 1")
}

pub(crate) fn check_budget(lm: &TransformerLm, prompt: &[TokenId], max_new_tokens: usize) -> Result<()> {
    if prompt.is_empty() {
        return Err(DebiasError::InvalidInput("prompt is empty".into()));
    }
    let needed = prompt.len() + max_new_tokens;
    let ctx = lm.config().context_length;
    if needed > ctx {
        return Err(DebiasError::SequenceTooLong { len: needed, max: ctx });
    }
    Ok(())
}

/// Samples up to `max_new_tokens` continuation tokens after `prompt`.
/// Stops early, without emitting it, when end-of-text is drawn.
pub fn generate_vanilla(
    lm: &TransformerLm,
    prompt: &[TokenId],
    max_new_tokens: usize,
    decode: &DecodeConfig,
    seed: u64,
) -> Result<Vec<TokenId>> {
    check_budget(lm, prompt, max_new_tokens)?;
    let mut sampler = StepSampler::new(seed);
    let mut st = lm.start();
    for &t in prompt {
        lm.push_token(&mut st, t)?;
    }
    let mut out = Vec::with_capacity(max_new_tokens);
    while out.len() < max_new_tokens {
        let probs = softmax(&lm.logits_from_hidden(st.last_hidden()));
        let tok = sample_top_k(&probs, decode.top_k, decode.temperature, sampler.next_uniform());
        if tok == EOT_ID {
            break;
        }
        out.push(tok);
        if out.len() < max_new_tokens {
            lm.push_token(&mut st, tok)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::LmConfig;

    fn lm() -> TransformerLm {
        TransformerLm::init(
            LmConfig {
                vocab_size: 12,
                context_length: 16,
                width: 8,
                layers: 1,
                heads: 2,
                mlp_ratio: 2,
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn top_one_is_argmax_for_any_u() {
        let p = [0.1, 0.5, 0.4];
        for u in [0.0, 0.3, 0.999] {
            assert_eq!(sample_top_k(&p, 1, 1.0, u), 1);
        }
    }

    #[test]
    fn inverse_cdf_walks_candidates_in_index_order() {
        let p = [0.2, 0.5, 0.3];
        assert_eq!(sample_top_k(&p, 3, 1.0, 0.19), 0);
        assert_eq!(sample_top_k(&p, 3, 1.0, 0.21), 1);
        assert_eq!(sample_top_k(&p, 3, 1.0, 0.71), 2);
        // Only the top two survive: 0.5/0.8 then 0.3/0.8.
        assert_eq!(sample_top_k(&p, 2, 1.0, 0.6), 1);
        assert_eq!(sample_top_k(&p, 2, 1.0, 0.7), 2);
    }

    #[test]
    fn small_shift_rarely_changes_the_draw() {
        let p = [0.2, 0.5, 0.3];
        let q = [0.21, 0.49, 0.3];
        let n = 1000;
        let moved = (0..n)
            .filter(|i| {
                let u = (*i as f64 + 0.5) / n as f64;
                sample_top_k(&p, 3, 1.0, u) != sample_top_k(&q, 3, 1.0, u)
            })
            .count();
        assert_eq!(moved, 10);
    }

    #[test]
    fn zero_new_tokens_gives_empty_continuation() {
        assert!(generate_vanilla(&lm(), &[4, 5], 0, &DecodeConfig::default(), 1).unwrap().is_empty());
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let m = lm();
        let d = DecodeConfig::default();
        assert_eq!(
            generate_vanilla(&m, &[4, 5], 10, &d, 9).unwrap(),
            generate_vanilla(&m, &[4, 5], 10, &d, 9).unwrap()
        );
    }

    #[test]
    fn greedy_generation_ignores_seed_and_matches_argmax() {
        let m = lm();
        let d = DecodeConfig { top_k: 1, temperature: 1.0 };
        let a = generate_vanilla(&m, &[4, 5], 8, &d, 1).unwrap();
        assert_eq!(a, generate_vanilla(&m, &[4, 5], 8, &d, 2).unwrap());
        let mut seq = vec![4, 5];
        for &t in &a {
            let s = m.forward_states(&seq).unwrap();
            let best = (0..s.logits.len()).max_by(|&i, &j| s.logits[i].total_cmp(&s.logits[j]).then(j.cmp(&i))).unwrap();
            assert_eq!(best, t);
            seq.push(t);
        }
    }

    #[test]
    fn prompt_budget_is_enforced() {
        let m = lm();
        assert!(matches!(
            generate_vanilla(&m, &[4; 10], 7, &DecodeConfig::default(), 1),
            Err(DebiasError::SequenceTooLong { len: 17, max: 16 })
        ));
        assert!(generate_vanilla(&m, &[], 1, &DecodeConfig::default(), 1).is_err());
    }
}
