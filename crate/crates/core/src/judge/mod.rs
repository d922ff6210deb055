//! The measurement classifier and the differentiable debias head.
//!
//! The two never share parameters: the judge embeds tokens with its own
//! table, while the head reads the language model's accumulated hidden state.

mod classifier;
mod head;
mod mlp;

use autodiff::{AdamConfig, AdamState, Graph, Var};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::corpus::Label;
use crate::{DebiasError, Result};

pub use classifier::{base_rate, BiasClassifier, JUDGE_KIND};
pub use head::{head_training_states, DebiasHead, HEAD_KIND};
pub use mlp::Mlp;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: usize,
    /// Derived from the experiment seed when run through the pipeline.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 32,
            learning_rate: 5e-3,
            hidden: 64,
            seed: 11,
        }
    }
}

impl ClassifierTrainConfig {
    pub fn validate(&self, section: &str) -> Vec<String> {
        let mut errs = Vec::new();
        if self.epochs == 0 {
            errs.push(format!("{section}.epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            errs.push(format!("{section}.batch_size must be >= 1"));
        }
        if self.hidden == 0 {
            errs.push(format!("{section}.hidden must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            errs.push(format!("{section}.learning_rate must be positive"));
        }
        errs
    }
}

/// Held-out quality of a trained classifier. F1 is macro-averaged over the
/// two classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub valid_macro_f1: f64,
    pub test_macro_f1: f64,
    pub test_accuracy: f64,
    pub best_epoch: usize,
    pub final_train_loss: f64,
}

/// Macro-averaged F1 over {L, C}. A class with no true or predicted members
/// contributes 0.
pub fn macro_f1(truth: &[Label], predicted: &[Label]) -> f64 {
    assert_eq!(truth.len(), predicted.len(), "label slices must align");
    let mut total = 0.0;
    for class in [Label::L, Label::C] {
        let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
        for (t, p) in truth.iter().zip(predicted) {
            match (*t == class, *p == class) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fneg += 1,
                _ => {}
            }
        }
        let denom = 2 * tp + fp + fneg;
        if denom > 0 {
            total += 2.0 * tp as f64 / denom as f64;
        }
    }
    total / 2.0
}

pub fn accuracy(truth: &[Label], predicted: &[Label]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    truth.iter().zip(predicted).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

fn check_two_classes(labels: impl Iterator<Item = Label>) -> Result<()> {
    let mut seen = [false; 2];
    for l in labels {
        seen[l.index()] = true;
    }
    if seen[0] && seen[1] {
        Ok(())
    } else {
        Err(DebiasError::InvalidInput("classifier training data holds a single class".into()))
    }
}

/// One Adam update on `params` from the scalar loss built by `loss_fn`.
fn adam_update<F>(params: &mut [Arc<autodiff::Tensor>], adam: &mut AdamState, loss_fn: F) -> Result<f64>
where
    F: FnOnce(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param_shared(p.clone())).collect();
    let loss = loss_fn(&mut g, &vars)?;
    let value = g.value(loss).data()[0];
    let mut grads = g.backward(loss)?;
    let grads: Vec<Vec<f64>> = vars.iter().map(|v| grads.take(*v).unwrap_or_default()).collect();
    drop(g);
    let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
    let mut slots: Vec<&mut [f64]> = params.iter_mut().map(|p| Arc::make_mut(p).data_mut()).collect();
    adam.step(&mut slots, &grad_refs)?;
    Ok(value)
}

fn new_adam(lr: f64) -> AdamState {
    AdamState::new(AdamConfig::with_learning_rate(lr))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn macro_f1_by_hand() {
        use Label::{C, L};
        let t = [L, L, C, C];
        let p = [L, C, C, C];
        // F1_L = 2/3, F1_C = 4/5.
        assert!((macro_f1(&t, &p) - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-12);
        assert_eq!(macro_f1(&t, &t), 1.0);
    }
}
