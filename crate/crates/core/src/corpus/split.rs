use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::{DebiasError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.70,
            valid: 0.15,
            test: 0.15,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let parts = [self.train, self.valid, self.test];
        if parts.iter().any(|r| !(0.0..=1.0).contains(r)) {
            errs.push("split ratios must lie in [0,1]".to_string());
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            errs.push(format!("split ratios must sum to 1, got {}", parts.iter().sum::<f64>()));
        }
        errs
    }
}

/// Stratified split: each class is shuffled with `seed` and cut by the ratios,
/// so per-class proportions are preserved to within one document.
pub fn split_dataset<T: Clone>(
    docs: &[T],
    label_of: impl Fn(&T) -> Label,
    ratios: SplitRatios,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let problems = ratios.validate();
    if !problems.is_empty() {
        return Err(DebiasError::Config(problems.join("; ")));
    }
    let nonzero = [ratios.train, ratios.valid, ratios.test]
        .iter()
        .filter(|&&r| r > 0.0)
        .count();
    if docs.len() < nonzero {
        return Err(DebiasError::Corpus(format!(
            "{} documents cannot fill {nonzero} splits",
            docs.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for label in [Label::L, Label::C] {
        let mut idx: Vec<usize> = (0..docs.len()).filter(|&i| label_of(&docs[i]) == label).collect();
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_train = (((n as f64) * ratios.train).round() as usize).min(n);
        let n_valid = (((n as f64) * ratios.valid).round() as usize).min(n - n_train);
        for (k, &i) in idx.iter().enumerate() {
            let d = docs[i].clone();
            if k < n_train {
                train.push(d);
            } else if k < n_train + n_valid {
                valid.push(d);
            } else {
                test.push(d);
            }
        }
    }
    Ok((train, valid, test))
}
