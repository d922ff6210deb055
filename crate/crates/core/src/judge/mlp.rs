use std::sync::Arc;

use autodiff::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::lm::{random_tensor, softmax};
use crate::Result;

/// `dense(in→hidden) + tanh + dense(hidden→2)`, the class-probability head
/// shared in shape by both classifiers. Parameter order: w1, b1, w2, b2.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub(crate) params: Vec<Arc<Tensor>>,
}

impl Mlp {
    pub fn init(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let s1 = 1.0 / (input as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        Self {
            params: vec![
                Arc::new(random_tensor(rng, &[input, hidden], s1)),
                Arc::new(Tensor::zeros(&[hidden])),
                Arc::new(random_tensor(rng, &[hidden, 2], s2)),
                Arc::new(Tensor::zeros(&[2])),
            ],
        }
    }

    pub fn seeded(input: usize, hidden: usize, seed: u64) -> Self {
        Self::init(input, hidden, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn input_dim(&self) -> usize {
        self.params[0].shape()[0]
    }

    pub fn hidden_dim(&self) -> usize {
        self.params[0].shape()[1]
    }

    pub fn layout(input: usize, hidden: usize) -> Vec<(String, Vec<usize>)> {
        vec![
            ("w1".into(), vec![input, hidden]),
            ("b1".into(), vec![hidden]),
            ("w2".into(), vec![hidden, 2]),
            ("b2".into(), vec![2]),
        ]
    }

    /// Logits `[n, 2]` for inputs `[n, in]`; `vars` are this head's bound
    /// parameters.
    pub fn graph_logits(g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        let h = g.matmul(x, vars[0])?;
        let h = g.add_row(h, vars[1])?;
        let h = g.tanh(h)?;
        let o = g.matmul(h, vars[2])?;
        Ok(g.add_row(o, vars[3])?)
    }

    pub fn logits(&self, x: &[f64]) -> [f64; 2] {
        let (w1, b1, w2, b2) = (
            self.params[0].data(),
            self.params[1].data(),
            self.params[2].data(),
            self.params[3].data(),
        );
        let hidden = self.hidden_dim();
        let mut h = b1.to_vec();
        for (i, xi) in x.iter().enumerate() {
            for (hj, w) in h.iter_mut().zip(&w1[i * hidden..(i + 1) * hidden]) {
                *hj += xi * w;
            }
        }
        let mut out = [b2[0], b2[1]];
        for (j, hj) in h.iter().enumerate() {
            let a = hj.tanh();
            out[0] += a * w2[2 * j];
            out[1] += a * w2[2 * j + 1];
        }
        out
    }

    /// Probability of class 1 (conservative).
    pub fn prob_c(&self, x: &[f64]) -> f64 {
        softmax(&self.logits(x))[1]
    }
}
