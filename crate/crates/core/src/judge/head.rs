use std::sync::Arc;

use autodiff::{Graph, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::{accuracy, adam_update, check_two_classes, macro_f1, new_adam, ClassifierReport, ClassifierTrainConfig, Mlp};
use crate::checkpoint::Checkpoint;
use crate::corpus::{Document, Label};
use crate::lm::TransformerLm;
use crate::{DebiasError, Result};

pub const HEAD_KIND: &str = "debias-head";

/// Reward classifier over the language model's accumulated hidden state.
/// Frozen during calibration; only its input receives gradients there.
#[derive(Debug, Clone, PartialEq)]
pub struct DebiasHead {
    mlp: Mlp,
}

/// A labeled accumulated hidden state.
pub type HeadExample = (Vec<f64>, Label);

/// Accumulated states of every `stride`-th prefix of each document (and of
/// the full document), labeled with the document's class. These match the
/// states the head sees while a sequence is being decoded.
pub fn head_training_states(lm: &TransformerLm, docs: &[Document], stride: usize) -> Result<Vec<HeadExample>> {
    let stride = stride.max(1);
    let ctx = lm.config().context_length;
    let mut out = Vec::new();
    for doc in docs {
        let toks = &doc.tokens[..doc.tokens.len().min(ctx)];
        let mut st = lm.start();
        for (i, &t) in toks.iter().enumerate() {
            lm.push_token(&mut st, t)?;
            if (i + 1) % stride == 0 || i + 1 == toks.len() {
                out.push((st.accumulated(), doc.label));
            }
        }
    }
    Ok(out)
}

/// Accumulated state of each full document.
fn final_states(lm: &TransformerLm, docs: &[Document]) -> Result<Vec<HeadExample>> {
    docs.iter()
        .map(|d| Ok((lm.forward_states(&d.tokens)?.accumulated, d.label)))
        .collect()
}

impl DebiasHead {
    pub fn from_mlp(mlp: Mlp) -> Self {
        Self { mlp }
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    /// P(conservative) for an accumulated hidden state.
    pub fn prob_c(&self, h: &[f64]) -> f64 {
        self.mlp.prob_c(h)
    }

    /// d P(conservative) / d h.
    pub fn input_gradient(&self, h: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let vars: Vec<_> = self.mlp.params.iter().map(|p| g.constant_shared(p.clone())).collect();
        let x = g.param(Tensor::matrix(1, h.len(), h.to_vec())?);
        let logits = Mlp::graph_logits(&mut g, &vars, x)?;
        let p = g.softmax(logits)?;
        let pc = g.slice_cols(p, 1, 1)?;
        let loss = g.sum(pc)?;
        let grads = g.backward(loss)?;
        Ok(grads.get(x).expect("input requires grad").to_vec())
    }

    fn evaluate(&self, examples: &[HeadExample]) -> (f64, f64) {
        let truth: Vec<Label> = examples.iter().map(|e| e.1).collect();
        let pred: Vec<Label> = examples
            .iter()
            .map(|(h, _)| if self.prob_c(h) >= 0.5 { Label::C } else { Label::L })
            .collect();
        (macro_f1(&truth, &pred), accuracy(&truth, &pred))
    }

    /// Trains on prefix states of `train` with the language model frozen.
    /// Test metrics are computed on full-document states.
    pub fn train(
        lm: &TransformerLm,
        train: &[Document],
        valid: &[Document],
        test: &[Document],
        stride: usize,
        config: &ClassifierTrainConfig,
    ) -> Result<(Self, ClassifierReport)> {
        let problems = config.validate("debias_head");
        if !problems.is_empty() {
            return Err(DebiasError::Config(problems.join("; ")));
        }
        check_two_classes(train.iter().map(|d| d.label))?;
        let train_x = head_training_states(lm, train, stride)?;
        let valid_x = head_training_states(lm, valid, stride)?;
        let test_x = final_states(lm, test)?;
        Self::fit(&train_x, &valid_x, &test_x, lm.config().width, config)
    }

    pub fn fit(
        train: &[HeadExample],
        valid: &[HeadExample],
        test: &[HeadExample],
        input_dim: usize,
        config: &ClassifierTrainConfig,
    ) -> Result<(Self, ClassifierReport)> {
        check_two_classes(train.iter().map(|e| e.1))?;
        if valid.is_empty() || test.is_empty() {
            return Err(DebiasError::InvalidInput("debias head needs non-empty valid and test sets".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Mlp::init(input_dim, config.hidden, &mut rng).params;
        let mut adam = new_adam(config.learning_rate);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut best: Option<(f64, usize, Self)> = None;
        let mut last_loss = f64::NAN;
        for epoch in 1..=config.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for chunk in order.chunks(config.batch_size) {
                let x: Vec<f64> = chunk.iter().flat_map(|&i| train[i].0.iter().copied()).collect();
                let x = Tensor::matrix(chunk.len(), input_dim, x)?;
                let labels: Vec<usize> = chunk.iter().map(|&i| train[i].1.index()).collect();
                epoch_loss += chunk.len() as f64
                    * adam_update(&mut params, &mut adam, |g, vars| {
                        let xv = g.constant(x);
                        let logits = Mlp::graph_logits(g, vars, xv)?;
                        let lp = g.log_softmax(logits)?;
                        let picked = g.gather(lp, &labels)?;
                        let m = g.mean(picked)?;
                        Ok(g.scale(m, -1.0)?)
                    })?;
            }
            last_loss = epoch_loss / train.len() as f64;
            let candidate = Self {
                mlp: Mlp { params: params.clone() },
            };
            let (f1, _) = candidate.evaluate(valid);
            if best.as_ref().map_or(true, |(bf, _, _)| f1 > *bf) {
                best = Some((f1, epoch, candidate));
            }
        }
        let (valid_f1, best_epoch, head) = best.expect("at least one epoch");
        let (test_f1, test_acc) = head.evaluate(test);
        Ok((
            head,
            ClassifierReport {
                valid_macro_f1: valid_f1,
                test_macro_f1: test_f1,
                test_accuracy: test_acc,
                best_epoch,
                final_train_loss: last_loss,
            },
        ))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let (d, h) = (self.mlp.input_dim(), self.mlp.hidden_dim());
        Checkpoint {
            kind: HEAD_KIND.into(),
            header: json!({"input_dim": d, "hidden": h}),
            blocks: Mlp::layout(d, h)
                .into_iter()
                .zip(&self.mlp.params)
                .map(|((n, _), t)| (n, (**t).clone()))
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.expect_kind(HEAD_KIND)?;
        let field = |k: &str| {
            ck.header
                .get(k)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| DebiasError::Checkpoint(format!("head header lacks {k}")))
        };
        let layout = Mlp::layout(field("input_dim")?, field("hidden")?);
        let params = ck.take_blocks(&layout)?.into_iter().map(Arc::new).collect();
        Ok(Self { mlp: Mlp { params } })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(n: usize, seed: u64) -> Vec<HeadExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = Label::from_index(i % 2);
                let sign = if label == Label::C { 1.0 } else { -1.0 };
                let h = (0..4).map(|j| if j == 0 { sign } else { 0.0 } + 0.3 * crate::lm::normal(&mut rng)).collect();
                (h, label)
            })
            .collect()
    }

    #[test]
    fn separable_states_are_learned() {
        let cfg = ClassifierTrainConfig { epochs: 10, batch_size: 16, hidden: 4, ..Default::default() };
        let (head, r) = DebiasHead::fit(&blobs(200, 1), &blobs(40, 2), &blobs(40, 3), 4, &cfg).unwrap();
        assert!(r.test_accuracy >= 0.9, "{r:?}");
        let p = head.prob_c(&[0.2, 0.1, 0.0, -0.3]);
        assert!((p + (1.0 - p) - 1.0).abs() < 1e-15 && (0.0..=1.0).contains(&p));
        let g = head.input_gradient(&[0.2, 0.1, 0.0, -0.3]).unwrap();
        assert!(g[0] > 0.0);
        let back = DebiasHead::from_checkpoint(Checkpoint::from_bytes(&head.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, head);
    }

    #[test]
    fn input_gradient_matches_finite_difference() {
        let head = DebiasHead { mlp: Mlp::seeded(3, 5, 9) };
        let h = [0.4, -0.2, 0.7];
        let g = head.input_gradient(&h).unwrap();
        for j in 0..3 {
            let (mut a, mut b) = (h, h);
            a[j] += 1e-6;
            b[j] -= 1e-6;
            let fd = (head.prob_c(&a) - head.prob_c(&b)) / 2e-6;
            assert!((fd - g[j]).abs() < 1e-8);
        }
    }
}
