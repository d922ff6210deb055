use std::sync::Arc;

use autodiff::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::TokenId;
use crate::{DebiasError, Result};

pub const LN_EPS: f64 = 1e-5;
const PER_LAYER: usize = 13;
pub const CHECKPOINT_KIND: &str = "transformer-lm";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub context_length: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl LmConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            context_length: 128,
            width: 64,
            layers: 2,
            heads: 2,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.vocab_size < 4 {
            errs.push("lm.vocab_size must cover the reserved tokens".to_string());
        }
        if self.context_length == 0 || self.width == 0 || self.layers == 0 || self.mlp_ratio == 0 {
            errs.push("lm dimensions must be positive".to_string());
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            errs.push(format!("lm.width {} must be divisible by lm.heads {}", self.width, self.heads));
        }
        errs
    }

    fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    fn hidden(&self) -> usize {
        self.width * self.mlp_ratio
    }

    /// Parameter names and shapes in checkpoint order.
    pub fn parameter_layout(&self) -> Vec<(String, Vec<usize>)> {
        let (v, c, d, h) = (self.vocab_size, self.context_length, self.width, self.hidden());
        let mut out = vec![("tok_emb".to_string(), vec![v, d]), ("pos_emb".to_string(), vec![c, d])];
        for l in 0..self.layers {
            let p = |s: &str| format!("layer{l}.{s}");
            out.extend([
                (p("ln1.gamma"), vec![d]),
                (p("ln1.beta"), vec![d]),
                (p("attn.wq"), vec![d, d]),
                (p("attn.wk"), vec![d, d]),
                (p("attn.wv"), vec![d, d]),
                (p("attn.wo"), vec![d, d]),
                (p("attn.bo"), vec![d]),
                (p("ln2.gamma"), vec![d]),
                (p("ln2.beta"), vec![d]),
                (p("mlp.w1"), vec![d, h]),
                (p("mlp.b1"), vec![h]),
                (p("mlp.w2"), vec![h, d]),
                (p("mlp.b2"), vec![d]),
            ]);
        }
        out.push(("lnf.gamma".to_string(), vec![d]));
        out.push(("lnf.beta".to_string(), vec![d]));
        out
    }
}

/// Indices into the flat parameter list for one transformer block.
#[derive(Clone, Copy)]
struct LayerIdx(usize);

impl LayerIdx {
    fn ln1_g(self) -> usize {
        self.0
    }
    fn ln1_b(self) -> usize {
        self.0 + 1
    }
    fn wq(self) -> usize {
        self.0 + 2
    }
    fn wk(self) -> usize {
        self.0 + 3
    }
    fn wv(self) -> usize {
        self.0 + 4
    }
    fn wo(self) -> usize {
        self.0 + 5
    }
    fn bo(self) -> usize {
        self.0 + 6
    }
    fn ln2_g(self) -> usize {
        self.0 + 7
    }
    fn ln2_b(self) -> usize {
        self.0 + 8
    }
    fn w1(self) -> usize {
        self.0 + 9
    }
    fn b1(self) -> usize {
        self.0 + 10
    }
    fn w2(self) -> usize {
        self.0 + 11
    }
    fn b2(self) -> usize {
        self.0 + 12
    }
}

pub(crate) fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; the open interval keeps ln away from zero.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub(crate) fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal(rng) * std).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Causal transformer language model with output projection tied to the
/// token embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLm {
    config: LmConfig,
    params: Vec<Arc<Tensor>>,
}

/// Per-sequence incremental decoding state (key/value cache and running
/// hidden-state sum).
#[derive(Debug, Clone)]
pub struct DecodeState {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
    hidden_sum: Vec<f64>,
    last_hidden: Vec<f64>,
}

impl DecodeState {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Final-layer hidden vector of the most recent position.
    pub fn last_hidden(&self) -> &[f64] {
        &self.last_hidden
    }

    /// Mean of the final-layer hidden vectors over all positions so far.
    pub fn accumulated(&self) -> Vec<f64> {
        let n = self.len.max(1) as f64;
        self.hidden_sum.iter().map(|v| v / n).collect()
    }
}

/// Output of [`TransformerLm::forward_states`].
#[derive(Debug, Clone)]
pub struct ForwardStates {
    /// Final-layer hidden vector per position.
    pub hidden: Vec<Vec<f64>>,
    /// Mean of `hidden` over all positions.
    pub accumulated: Vec<f64>,
    pub logits: Vec<f64>,
    pub distribution: Vec<f64>,
}

fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let s = 1.0 / (var + LN_EPS).sqrt();
    x.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(v, (g, b))| (v - mean) * s * g + b)
        .collect()
}

/// `v · M` for a row-major `[v.len(), cols]` matrix.
fn vecmat(v: &[f64], m: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (i, &vi) in v.iter().enumerate() {
        let row = &m[i * cols..(i + 1) * cols];
        for (o, r) in out.iter_mut().zip(row) {
            *o += vi * r;
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044715 * x * x * x)).tanh())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

impl TransformerLm {
    pub fn init(config: LmConfig, seed: u64) -> Result<Self> {
        let problems = config.validate();
        if !problems.is_empty() {
            return Err(DebiasError::Config(problems.join("; ")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let residual_std = 0.02 / (2.0 * config.layers as f64).sqrt();
        let params = config
            .parameter_layout()
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with("gamma") {
                    Tensor::full(&shape, 1.0)
                } else if name.ends_with("beta") || name.contains(".b") {
                    Tensor::zeros(&shape)
                } else if name.ends_with("wo") || name.ends_with("w2") {
                    random_tensor(&mut rng, &shape, residual_std)
                } else {
                    random_tensor(&mut rng, &shape, 0.02)
                };
                Arc::new(t)
            })
            .collect();
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn params(&self) -> &[Arc<Tensor>] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut Vec<Arc<Tensor>> {
        &mut self.params
    }

    /// The token embedding table, which is also the output projection.
    pub fn token_embeddings(&self) -> &Arc<Tensor> {
        &self.params[0]
    }

    /// Output projection weights as used for logits (`[vocab, width]`).
    pub fn output_projection(&self) -> &Arc<Tensor> {
        &self.params[0]
    }

    fn layer(&self, l: usize) -> LayerIdx {
        LayerIdx(2 + l * PER_LAYER)
    }

    fn lnf(&self) -> (usize, usize) {
        let base = 2 + self.config.layers * PER_LAYER;
        (base, base + 1)
    }

    fn p(&self, i: usize) -> &[f64] {
        self.params[i].data()
    }

    // ---- graph forward (training) ----

    /// Records the parameters on `g`, trainable or frozen.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    g.param_shared(p.clone())
                } else {
                    g.constant_shared(p.clone())
                }
            })
            .collect()
    }

    /// Final-layer hidden states `[n, width]` for one sequence.
    pub fn graph_hidden(&self, g: &mut Graph, vars: &[Var], ids: &[TokenId]) -> Result<Var> {
        let n = ids.len();
        if n == 0 {
            return Err(DebiasError::InvalidInput("empty sequence".into()));
        }
        if n > self.config.context_length {
            return Err(DebiasError::SequenceTooLong {
                len: n,
                max: self.config.context_length,
            });
        }
        let positions: Vec<usize> = (0..n).collect();
        let tok = g.embedding(vars[0], ids)?;
        let pos = g.embedding(vars[1], &positions)?;
        let mut x = g.add(tok, pos)?;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        for l in 0..self.config.layers {
            let li = self.layer(l);
            let h = g.layer_norm(x, vars[li.ln1_g()], vars[li.ln1_b()], LN_EPS)?;
            let q = g.matmul(h, vars[li.wq()])?;
            let k = g.matmul(h, vars[li.wk()])?;
            let v = g.matmul(h, vars[li.wv()])?;
            let mut heads = Vec::with_capacity(self.config.heads);
            for hd in 0..self.config.heads {
                let qh = g.slice_cols(q, hd * dh, dh)?;
                let kh = g.slice_cols(k, hd * dh, dh)?;
                let vh = g.slice_cols(v, hd * dh, dh)?;
                let w = g.causal_attention(qh, kh, scale)?;
                heads.push(g.matmul(w, vh)?);
            }
            let cat = if heads.len() == 1 { heads[0] } else { g.concat(&heads)? };
            let proj = g.matmul(cat, vars[li.wo()])?;
            let proj = g.add_row(proj, vars[li.bo()])?;
            x = g.add(x, proj)?;
            let h2 = g.layer_norm(x, vars[li.ln2_g()], vars[li.ln2_b()], LN_EPS)?;
            let m = g.matmul(h2, vars[li.w1()])?;
            let m = g.add_row(m, vars[li.b1()])?;
            let m = g.gelu(m)?;
            let m = g.matmul(m, vars[li.w2()])?;
            let m = g.add_row(m, vars[li.b2()])?;
            x = g.add(x, m)?;
        }
        let (gf, bf) = self.lnf();
        Ok(g.layer_norm(x, vars[gf], vars[bf], LN_EPS)?)
    }

    /// Sum of next-token negative log-likelihoods over `ids[1..]`.
    /// `emb_t` is the transposed token embedding (`[width, vocab]`).
    pub fn graph_sequence_nll(&self, g: &mut Graph, vars: &[Var], emb_t: Var, ids: &[TokenId]) -> Result<Var> {
        if ids.len() < 2 {
            return Err(DebiasError::InvalidInput("need at least two tokens for a language-model loss".into()));
        }
        let inputs = &ids[..ids.len() - 1];
        let h = self.graph_hidden(g, vars, inputs)?;
        let logits = g.matmul(h, emb_t)?;
        let lp = g.log_softmax(logits)?;
        let picked = g.gather(lp, &ids[1..])?;
        let s = g.sum(picked)?;
        Ok(g.scale(s, -1.0)?)
    }

    // ---- inference ----

    pub fn start(&self) -> DecodeState {
        let d = self.config.width;
        DecodeState {
            keys: vec![Vec::new(); self.config.layers],
            values: vec![Vec::new(); self.config.layers],
            len: 0,
            hidden_sum: vec![0.0; d],
            last_hidden: vec![0.0; d],
        }
    }

    /// Appends one token to the decoding state.
    pub fn push_token(&self, st: &mut DecodeState, token: TokenId) -> Result<()> {
        let cfg = &self.config;
        let d = cfg.width;
        if st.len >= cfg.context_length {
            return Err(DebiasError::SequenceTooLong {
                len: st.len + 1,
                max: cfg.context_length,
            });
        }
        if token >= cfg.vocab_size {
            return Err(DebiasError::InvalidInput(format!("token id {token} outside vocabulary")));
        }
        let pos = st.len;
        let mut x: Vec<f64> = self.p(0)[token * d..(token + 1) * d]
            .iter()
            .zip(&self.p(1)[pos * d..(pos + 1) * d])
            .map(|(a, b)| a + b)
            .collect();
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let n = pos + 1;
        for l in 0..cfg.layers {
            let li = self.layer(l);
            let h = layer_norm(&x, self.p(li.ln1_g()), self.p(li.ln1_b()));
            let q = vecmat(&h, self.p(li.wq()), d);
            st.keys[l].extend(vecmat(&h, self.p(li.wk()), d));
            st.values[l].extend(vecmat(&h, self.p(li.wv()), d));
            let (keys, values) = (&st.keys[l], &st.values[l]);
            let mut cat = vec![0.0; d];
            for hd in 0..cfg.heads {
                let off = hd * dh;
                let qh = &q[off..off + dh];
                let scores: Vec<f64> = (0..n)
                    .map(|t| {
                        let kt = &keys[t * d + off..t * d + off + dh];
                        qh.iter().zip(kt).map(|(a, b)| a * b).sum::<f64>() * scale
                    })
                    .collect();
                let w = softmax(&scores);
                for (t, wt) in w.iter().enumerate() {
                    let vt = &values[t * d + off..t * d + off + dh];
                    for (c, v) in cat[off..off + dh].iter_mut().zip(vt) {
                        *c += wt * v;
                    }
                }
            }
            let proj = vecmat(&cat, self.p(li.wo()), d);
            for ((xi, pi), bi) in x.iter_mut().zip(&proj).zip(self.p(li.bo())) {
                *xi += pi + bi;
            }
            let h2 = layer_norm(&x, self.p(li.ln2_g()), self.p(li.ln2_b()));
            let hidden = cfg.hidden();
            let mut m = vecmat(&h2, self.p(li.w1()), hidden);
            for (mi, bi) in m.iter_mut().zip(self.p(li.b1())) {
                *mi = gelu(*mi + bi);
            }
            let m = vecmat(&m, self.p(li.w2()), d);
            for ((xi, mi), bi) in x.iter_mut().zip(&m).zip(self.p(li.b2())) {
                *xi += mi + bi;
            }
        }
        let (gf, bf) = self.lnf();
        let hf = layer_norm(&x, self.p(gf), self.p(bf));
        for (s, v) in st.hidden_sum.iter_mut().zip(&hf) {
            *s += v;
        }
        st.last_hidden = hf;
        st.len += 1;
        Ok(())
    }

    /// Next-token logits through the tied output projection.
    pub fn logits_from_hidden(&self, h: &[f64]) -> Vec<f64> {
        let d = self.config.width;
        self.p(0)
            .chunks_exact(d)
            .map(|row| row.iter().zip(h).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn forward_states(&self, ids: &[TokenId]) -> Result<ForwardStates> {
        if ids.is_empty() {
            return Err(DebiasError::InvalidInput("empty sequence".into()));
        }
        if ids.len() > self.config.context_length {
            return Err(DebiasError::SequenceTooLong {
                len: ids.len(),
                max: self.config.context_length,
            });
        }
        let mut st = self.start();
        let mut hidden = Vec::with_capacity(ids.len());
        for &t in ids {
            self.push_token(&mut st, t)?;
            hidden.push(st.last_hidden.clone());
        }
        let logits = self.logits_from_hidden(st.last_hidden());
        let distribution = softmax(&logits);
        Ok(ForwardStates {
            hidden,
            accumulated: st.accumulated(),
            logits,
            distribution,
        })
    }

    /// Mean per-token negative log-likelihood of predicting `ids[1..]`.
    pub fn sequence_nll(&self, ids: &[TokenId]) -> Result<(f64, usize)> {
        let mut st = self.start();
        let mut total = 0.0;
        for w in ids.windows(2) {
            self.push_token(&mut st, w[0])?;
            let lp = log_softmax(&self.logits_from_hidden(st.last_hidden()));
            total -= lp[w[1]];
        }
        Ok((total, ids.len().saturating_sub(1)))
    }

    // ---- persistence ----

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: CHECKPOINT_KIND.to_string(),
            header: serde_json::to_value(self.config).expect("config serializes"),
            blocks: self
                .config
                .parameter_layout()
                .into_iter()
                .zip(&self.params)
                .map(|((name, _), t)| (name, (**t).clone()))
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let config: LmConfig = serde_json::from_value(ck.header.clone())
            .map_err(|e| DebiasError::Checkpoint(format!("bad lm header: {e}")))?;
        let problems = config.validate();
        if !problems.is_empty() {
            return Err(DebiasError::Checkpoint(problems.join("; ")));
        }
        let tensors = ck.take_blocks(&config.parameter_layout())?;
        Ok(Self {
            config,
            params: tensors.into_iter().map(Arc::new).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TransformerLm {
        let cfg = LmConfig {
            vocab_size: 11,
            context_length: 8,
            width: 8,
            layers: 2,
            heads: 2,
            mlp_ratio: 2,
        };
        TransformerLm::init(cfg, 5).unwrap()
    }

    #[test]
    fn graph_and_inference_forward_agree() {
        let lm = tiny();
        let ids = [3, 7, 1, 9, 4];
        let mut g = Graph::new();
        let vars = lm.bind(&mut g, false);
        let h = lm.graph_hidden(&mut g, &vars, &ids).unwrap();
        let states = lm.forward_states(&ids).unwrap();
        let gh = g.value(h);
        for (t, row) in states.hidden.iter().enumerate() {
            for (a, b) in row.iter().zip(gh.row(t)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_position_accumulated_state_is_that_position() {
        let lm = tiny();
        let s = lm.forward_states(&[4]).unwrap();
        assert_eq!(s.accumulated, s.hidden[0]);
    }

    #[test]
    fn accumulated_state_is_running_mean() {
        let lm = tiny();
        let s = lm.forward_states(&[4, 2, 8, 8, 3]).unwrap();
        for j in 0..8 {
            let brute: f64 = s.hidden.iter().map(|h| h[j]).sum::<f64>() / 5.0;
            assert!((brute - s.accumulated[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn distribution_sums_to_one() {
        let s = tiny().forward_states(&[4, 2]).unwrap();
        assert!((s.distribution.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn too_long_sequence_is_rejected() {
        let lm = tiny();
        assert!(matches!(
            lm.forward_states(&[1; 9]),
            Err(DebiasError::SequenceTooLong { len: 9, max: 8 })
        ));
    }

    #[test]
    fn output_projection_is_the_embedding_table() {
        let lm = tiny();
        assert!(Arc::ptr_eq(lm.token_embeddings(), lm.output_projection()));
        let h = vec![0.5; 8];
        let logits = lm.logits_from_hidden(&h);
        let e = lm.token_embeddings();
        for (v, l) in logits.iter().enumerate() {
            let manual: f64 = e.row(v).iter().map(|x| x * 0.5).sum();
            assert!((manual - l).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let lm = tiny();
        let back = TransformerLm::from_checkpoint(Checkpoint::from_bytes(&lm.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, lm);
    }
}
