use autodiff::{AdamConfig, AdamState, Graph};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{LmConfig, TransformerLm};
use crate::corpus::{Document, EOT_ID};
use crate::{DebiasError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Derived from the experiment seed when run through the pipeline.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_size: 16,
            learning_rate: 3e-3,
            seed: 7,
        }
    }
}

impl LmTrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.epochs == 0 {
            errs.push("lm_train.epochs must be >= 1".to_string());
        }
        if self.batch_size == 0 {
            errs.push("lm_train.batch_size must be >= 1".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            errs.push("lm_train.learning_rate must be positive".to_string());
        }
        errs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmTrainReport {
    /// Mean token loss of the first batch before any update.
    pub initial_loss: f64,
    pub initial_valid_loss: f64,
    pub valid_losses: Vec<f64>,
    pub best_valid_loss: f64,
    pub best_epoch: usize,
    pub steps: usize,
    /// Set when training stopped on a non-finite loss or gradient.
    pub diverged_at_step: Option<usize>,
}

fn sequence(doc: &Document, context: usize) -> Vec<usize> {
    let mut s = doc.tokens.clone();
    s.push(EOT_ID);
    s.truncate(context + 1);
    s
}

fn mean_valid_loss(lm: &TransformerLm, seqs: &[Vec<usize>]) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0usize);
    for s in seqs {
        let (t, n) = lm.sequence_nll(s)?;
        total += t;
        count += n;
    }
    Ok(total / count.max(1) as f64)
}

/// Returns the loss and gradients of one batch, in parameter order.
fn batch_gradients(lm: &TransformerLm, batch: &[&Vec<usize>]) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let vars = lm.bind(&mut g, true);
    let emb_t = g.transpose(vars[0])?;
    let mut total = None;
    let mut predictions = 0usize;
    for s in batch {
        let nll = lm.graph_sequence_nll(&mut g, &vars, emb_t, s)?;
        predictions += s.len() - 1;
        total = Some(match total {
            None => nll,
            Some(acc) => g.add(acc, nll)?,
        });
    }
    let total = total.ok_or_else(|| DebiasError::InvalidInput("empty batch".into()))?;
    let loss = g.scale(total, 1.0 / predictions as f64)?;
    let value = g.value(loss).data()[0];
    let mut grads = g.backward(loss)?;
    let out = vars
        .iter()
        .map(|v| grads.take(*v).expect("every parameter receives a gradient"))
        .collect();
    Ok((value, out))
}

/// Trains `lm_config` on `train` with Adam and keeps the weights with the best
/// validation loss. A non-finite loss stops training and returns the best
/// weights seen so far.
pub fn train_lm(
    train: &[Document],
    valid: &[Document],
    lm_config: LmConfig,
    config: &LmTrainConfig,
) -> Result<(TransformerLm, LmTrainReport)> {
    let problems = config.validate();
    if !problems.is_empty() {
        return Err(DebiasError::Config(problems.join("; ")));
    }
    if train.is_empty() || valid.is_empty() {
        return Err(DebiasError::InvalidInput("train_lm needs non-empty train and valid sets".into()));
    }
    let ctx = lm_config.context_length;
    let train_seqs: Vec<Vec<usize>> = train.iter().map(|d| sequence(d, ctx)).collect();
    let valid_seqs: Vec<Vec<usize>> = valid.iter().map(|d| sequence(d, ctx)).collect();

    let mut lm = TransformerLm::init(lm_config, config.seed)?;
    let mut adam = AdamState::new(AdamConfig::with_learning_rate(config.learning_rate));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let initial_valid_loss = mean_valid_loss(&lm, &valid_seqs)?;
    let mut best = lm.clone();
    let mut report = LmTrainReport {
        initial_loss: f64::NAN,
        initial_valid_loss,
        valid_losses: Vec::new(),
        best_valid_loss: initial_valid_loss,
        best_epoch: 0,
        steps: 0,
        diverged_at_step: None,
    };
    let mut order: Vec<usize> = (0..train_seqs.len()).collect();
    'epochs: for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Vec<usize>> = chunk.iter().map(|&i| &train_seqs[i]).collect();
            let (loss, grads) = match batch_gradients(&lm, &batch) {
                Ok(v) => v,
                Err(DebiasError::Autodiff(_)) => {
                    report.diverged_at_step = Some(report.steps);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            if report.steps == 0 {
                report.initial_loss = loss;
            }
            let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
            let mut params: Vec<&mut [f64]> = lm
                .params_mut()
                .iter_mut()
                .map(|p| std::sync::Arc::make_mut(p).data_mut())
                .collect();
            if adam.step(&mut params, &grad_refs).is_err() {
                report.diverged_at_step = Some(report.steps);
                break 'epochs;
            }
            report.steps += 1;
        }
        let vl = mean_valid_loss(&lm, &valid_seqs)?;
        if !vl.is_finite() {
            report.diverged_at_step = Some(report.steps);
            break;
        }
        report.valid_losses.push(vl);
        if vl < report.best_valid_loss {
            report.best_valid_loss = vl;
            report.best_epoch = epoch;
            best = lm.clone();
        }
    }
    Ok((best, report))
}
