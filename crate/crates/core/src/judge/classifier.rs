use std::sync::Arc;

use autodiff::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::{accuracy, adam_update, check_two_classes, macro_f1, new_adam, ClassifierReport, ClassifierTrainConfig, Mlp};
use crate::checkpoint::Checkpoint;
use crate::corpus::{Document, Label, TokenId, Vocab};
use crate::lm::random_tensor;
use crate::{DebiasError, Result};

pub const JUDGE_KIND: &str = "bias-classifier";

/// Bag-of-embeddings ideology classifier: mean-pooled token embeddings from
/// its own table, then [`Mlp`]. Scores are P(conservative).
#[derive(Debug, Clone, PartialEq)]
pub struct BiasClassifier {
    vocab: Vocab,
    embeddings: Arc<Tensor>,
    mlp: Mlp,
}

impl BiasClassifier {
    pub const EMBED_DIM: usize = 64;

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn pooled(&self, ids: &[TokenId]) -> Vec<f64> {
        let d = self.embeddings.shape()[1];
        let mut out = vec![0.0; d];
        for &id in ids {
            for (o, e) in out.iter_mut().zip(self.embeddings.row(id)) {
                *o += e;
            }
        }
        let n = ids.len() as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }

    pub fn score_ids(&self, ids: &[TokenId]) -> Result<f64> {
        if ids.is_empty() {
            return Err(DebiasError::InvalidInput("cannot score an empty text".into()));
        }
        Ok(self.mlp.prob_c(&self.pooled(ids)))
    }

    /// P(conservative) for `text`; words outside the vocabulary count as unknown.
    pub fn judge_score(&self, text: &str) -> Result<f64> {
        self.score_ids(&self.vocab.tokenize(text))
    }

    pub fn predict(&self, ids: &[TokenId]) -> Result<Label> {
        Ok(if self.score_ids(ids)? >= 0.5 { Label::C } else { Label::L })
    }

    fn evaluate(&self, docs: &[Document]) -> Result<(f64, f64)> {
        let truth: Vec<Label> = docs.iter().map(|d| d.label).collect();
        let pred = docs.iter().map(|d| self.predict(&d.tokens)).collect::<Result<Vec<_>>>()?;
        Ok((macro_f1(&truth, &pred), accuracy(&truth, &pred)))
    }

    /// Trains with softmax cross-entropy; keeps the epoch with the best
    /// validation macro-F1.
    pub fn train(
        vocab: &Vocab,
        train: &[Document],
        valid: &[Document],
        test: &[Document],
        config: &ClassifierTrainConfig,
    ) -> Result<(Self, ClassifierReport)> {
        let problems = config.validate("judge");
        if !problems.is_empty() {
            return Err(DebiasError::Config(problems.join("; ")));
        }
        check_two_classes(train.iter().map(|d| d.label))?;
        if valid.is_empty() || test.is_empty() {
            return Err(DebiasError::InvalidInput("judge needs non-empty valid and test splits".into()));
        }
        let v = vocab.len();
        let d = Self::EMBED_DIM;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let embeddings = Arc::new(random_tensor(&mut rng, &[v, d], 0.1));
        let mlp = Mlp::init(d, config.hidden, &mut rng);
        let mut params: Vec<Arc<Tensor>> = std::iter::once(embeddings).chain(mlp.params).collect();
        let mut adam = new_adam(config.learning_rate);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut best: Option<(f64, usize, Self)> = None;
        let mut last_loss = f64::NAN;
        for epoch in 1..=config.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for chunk in order.chunks(config.batch_size) {
                let b = chunk.len();
                let mut bag = vec![0.0; b * v];
                for (r, &i) in chunk.iter().enumerate() {
                    let toks = &train[i].tokens;
                    for &t in toks {
                        bag[r * v + t] += 1.0 / toks.len() as f64;
                    }
                }
                let labels: Vec<usize> = chunk.iter().map(|&i| train[i].label.index()).collect();
                let bag = Tensor::matrix(b, v, bag)?;
                epoch_loss += b as f64
                    * adam_update(&mut params, &mut adam, |g, vars| {
                        let a = g.constant(bag);
                        let pooled = g.matmul(a, vars[0])?;
                        let logits = Mlp::graph_logits(g, &vars[1..], pooled)?;
                        let lp = g.log_softmax(logits)?;
                        let picked = g.gather(lp, &labels)?;
                        let m = g.mean(picked)?;
                        Ok(g.scale(m, -1.0)?)
                    })?;
            }
            last_loss = epoch_loss / train.len() as f64;
            let candidate = Self {
                vocab: vocab.clone(),
                embeddings: params[0].clone(),
                mlp: Mlp { params: params[1..].to_vec() },
            };
            let (f1, _) = candidate.evaluate(valid)?;
            if best.as_ref().map_or(true, |(bf, _, _)| f1 > *bf) {
                best = Some((f1, epoch, candidate));
            }
        }
        let (valid_f1, best_epoch, model) = best.expect("at least one epoch");
        let (test_f1, test_acc) = model.evaluate(test)?;
        Ok((
            model,
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
        let (v, d) = (self.embeddings.shape()[0], self.embeddings.shape()[1]);
        let mut blocks = vec![("embeddings".to_string(), (*self.embeddings).clone())];
        blocks.extend(
            Mlp::layout(d, self.mlp.hidden_dim())
                .into_iter()
                .zip(&self.mlp.params)
                .map(|((n, _), t)| (n, (**t).clone())),
        );
        Checkpoint {
            kind: JUDGE_KIND.into(),
            header: json!({"vocab_size": v, "embed_dim": d, "hidden": self.mlp.hidden_dim(), "vocab": self.vocab.to_lines()}),
            blocks,
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.expect_kind(JUDGE_KIND)?;
        let field = |k: &str| {
            ck.header
                .get(k)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| DebiasError::Checkpoint(format!("judge header lacks {k}")))
        };
        let (v, d, h) = (field("vocab_size")?, field("embed_dim")?, field("hidden")?);
        let vocab_text = ck
            .header
            .get("vocab")
            .and_then(|s| s.as_str())
            .ok_or_else(|| DebiasError::Checkpoint("judge header lacks vocab".into()))?;
        let vocab = Vocab::from_lines(vocab_text)?;
        if vocab.len() != v {
            return Err(DebiasError::Checkpoint("judge vocabulary size mismatch".into()));
        }
        let mut layout = vec![("embeddings".to_string(), vec![v, d])];
        layout.extend(Mlp::layout(d, h));
        let mut tensors = ck.take_blocks(&layout)?.into_iter().map(Arc::new);
        let embeddings = tensors.next().expect("layout has embeddings");
        Ok(Self {
            vocab,
            embeddings,
            mlp: Mlp { params: tensors.collect() },
        })
    }
}

/// Judge scores of `texts`, in order.
pub fn base_rate<S: AsRef<str>>(judge: &BiasClassifier, texts: &[S]) -> Result<Vec<f64>> {
    if texts.is_empty() {
        return Err(DebiasError::InvalidInput("base rate of an empty text set".into()));
    }
    texts.iter().map(|t| judge.judge_score(t.as_ref())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (Vocab, Vec<Document>) {
        let vocab = Vocab::from_words(["red", "blue", "the", "a"].map(String::from));
        let (red, blue, the, a) = (3, 4, 5, 6);
        let docs = (0..60)
            .map(|i| {
                let label = Label::from_index(i % 2);
                let marker = if label == Label::L { blue } else { red };
                Document {
                    tokens: vec![the, marker, if i % 3 == 0 { a } else { the }, marker],
                    label,
                }
            })
            .collect();
        (vocab, docs)
    }

    #[test]
    fn learns_separable_markers_and_round_trips() {
        let (vocab, docs) = toy();
        let cfg = ClassifierTrainConfig { epochs: 10, batch_size: 8, ..Default::default() };
        let (judge, report) = BiasClassifier::train(&vocab, &docs, &docs, &docs, &cfg).unwrap();
        assert!(report.test_macro_f1 > 0.99, "{report:?}");
        assert!(judge.judge_score("red red").unwrap() > 0.9);
        assert!(judge.judge_score("blue blue").unwrap() < 0.1);
        let back = BiasClassifier::from_checkpoint(Checkpoint::from_bytes(&judge.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, judge);
    }

    #[test]
    fn score_is_permutation_invariant_and_bounded() {
        let (vocab, docs) = toy();
        let cfg = ClassifierTrainConfig { epochs: 1, ..Default::default() };
        let (judge, _) = BiasClassifier::train(&vocab, &docs, &docs, &docs, &cfg).unwrap();
        let a = judge.judge_score("the red a blue").unwrap();
        let b = judge.judge_score("blue a red the").unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&a));
        assert!(judge.judge_score("").is_err());
        let br = base_rate(&judge, &["red", "red", "blue"]).unwrap();
        assert_eq!(br.len(), 3);
        assert_eq!(br[0], br[1]);
    }

    #[test]
    fn single_class_is_rejected() {
        let (vocab, mut docs) = toy();
        docs.iter_mut().for_each(|d| d.label = Label::L);
        let cfg = ClassifierTrainConfig::default();
        assert!(BiasClassifier::train(&vocab, &docs, &docs, &docs, &cfg).is_err());
    }
}
