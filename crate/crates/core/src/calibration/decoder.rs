use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use autodiff::{AdamConfig, AdamState, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::formulas::{mode1_gain, mode2_gain, mode2_step_gain, reward, update_lambda};
use super::{CalibrationConfig, CalibrationMode};
use crate::corpus::{BiasWords, TokenId, Vocab, EOT_ID};
use crate::judge::{DebiasHead, Mlp};
use crate::lm::{log_softmax, sample_top_k, softmax, DecodeConfig, DecodeState, StepSampler, TransformerLm};
use crate::{DebiasError, Result};

/// One calibrated token step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    /// Index of the generation this step belongs to.
    pub sample: usize,
    pub step: usize,
    /// `λ_t` used for this step.
    pub lambda: f64,
    pub kl: f64,
    pub gain: f64,
    pub reward: f64,
    pub token_id: TokenId,
    pub vanilla_token_id: TokenId,
    pub reverted_flag: bool,
    /// Inner objective at `Δh = 0` and after the last inner step.
    pub objective_initial: f64,
    pub objective_final: f64,
}

/// Token ids of the bias lexicons; words outside `vocab` are skipped and
/// counted.
pub fn resolve_bias_words(words: &BiasWords, vocab: &Vocab) -> (Vec<TokenId>, Vec<TokenId>, usize) {
    let mut skipped = 0;
    let mut ids = |list: &[String]| -> Vec<TokenId> {
        list.iter()
            .filter_map(|w| {
                let id = vocab.id(w);
                if id.is_none() {
                    skipped += 1;
                }
                id
            })
            .collect()
    };
    let l = ids(&words.liberal);
    let c = ids(&words.conservative);
    (l, c, skipped)
}

/// What the gain is computed from.
#[derive(Debug, Clone)]
pub enum ModeInputs {
    Emb {
        liberal: Vec<TokenId>,
        conservative: Vec<TokenId>,
        /// `[vocab, 1]` indicator columns of the two lexicons.
        liberal_ind: Arc<Tensor>,
        conservative_ind: Arc<Tensor>,
    },
    Cls { head: DebiasHead },
}

impl ModeInputs {
    pub fn emb(vocab_size: usize, liberal: Vec<TokenId>, conservative: Vec<TokenId>) -> Result<Self> {
        if liberal.is_empty() && conservative.is_empty() {
            return Err(DebiasError::InvalidInput("both bias-word lists are empty".into()));
        }
        let indicator = |ids: &[TokenId]| -> Result<Arc<Tensor>> {
            let mut col = vec![0.0; vocab_size];
            for &i in ids {
                if i >= vocab_size {
                    return Err(DebiasError::InvalidInput(format!("bias word id {i} outside vocabulary")));
                }
                col[i] = 1.0;
            }
            Ok(Arc::new(Tensor::new(vec![vocab_size, 1], col)?))
        };
        Ok(Self::Emb {
            liberal_ind: indicator(&liberal)?,
            conservative_ind: indicator(&conservative)?,
            liberal,
            conservative,
        })
    }

    pub fn cls(head: DebiasHead) -> Self {
        Self::Cls { head }
    }

    pub fn mode(&self) -> CalibrationMode {
        match self {
            Self::Emb { .. } => CalibrationMode::Emb,
            Self::Cls { .. } => CalibrationMode::Cls,
        }
    }
}

/// Result of [`Calibrator::step`].
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub token: TokenId,
    pub vanilla_token: TokenId,
    pub next_lambda: f64,
    /// Single-step classifier gain at the emitted state (cls mode), kept for
    /// the discounted window of later steps.
    pub step_gain: f64,
    pub entry: TraceEntry,
}

struct StepContext<'s> {
    vanilla_logits: Arc<Tensor>,
    log_pi: Arc<Tensor>,
    pi: Arc<Tensor>,
    hbar: Arc<Tensor>,
    /// `h̄·Eᵀ`, the accumulated state through the output projection.
    hbar_logits: Arc<Tensor>,
    action: TokenId,
    lambda: f64,
    past: &'s [f64],
}

struct Evaluated {
    graph: Graph,
    dh: Var,
    objective: Var,
    log_probs: Vec<f64>,
    gain: f64,
    step_gain: f64,
}

/// Per-model calibration machinery. Immutable; share across workers.
pub struct Calibrator<'a> {
    lm: &'a TransformerLm,
    emb_t: Arc<Tensor>,
    head_params: Vec<Arc<Tensor>>,
    inputs: &'a ModeInputs,
    config: &'a CalibrationConfig,
}

impl<'a> Calibrator<'a> {
    pub fn new(lm: &'a TransformerLm, inputs: &'a ModeInputs, config: &'a CalibrationConfig) -> Result<Self> {
        let problems = config.validate();
        if !problems.is_empty() {
            return Err(DebiasError::Config(problems.join("; ")));
        }
        if inputs.mode() != config.mode {
            return Err(DebiasError::Config(format!(
                "calibration mode {} does not match the supplied inputs",
                config.mode.as_str()
            )));
        }
        let e = lm.output_projection();
        let (v, d) = (e.shape()[0], e.shape()[1]);
        let mut t = vec![0.0; v * d];
        for (i, row) in e.data().chunks_exact(d).enumerate() {
            for (j, x) in row.iter().enumerate() {
                t[j * v + i] = *x;
            }
        }
        let head_params = match inputs {
            ModeInputs::Cls { head } => {
                if head.input_dim() != d {
                    return Err(DebiasError::Config("debias head width differs from the model width".into()));
                }
                head.mlp().params.clone()
            }
            ModeInputs::Emb { .. } => Vec::new(),
        };
        Ok(Self {
            lm,
            emb_t: Arc::new(Tensor::new(vec![d, v], t)?),
            head_params,
            inputs,
            config,
        })
    }

    fn window_past(&self, past: &[f64]) -> (f64, usize) {
        // Discounted sum of the previous `τ` gains; the current one has weight 1.
        let used = &past[past.len().saturating_sub(self.config.window)..];
        let n = used.len();
        let sum = used
            .iter()
            .enumerate()
            .map(|(i, r)| self.config.gamma.powi((n - i) as i32) * r)
            .sum();
        (sum, n + 1)
    }

    fn evaluate(&self, cx: &StepContext<'_>, dh: &[f64]) -> Result<Evaluated> {
        let d = dh.len();
        let mut g = Graph::new();
        let dh_var = g.param(Tensor::matrix(1, d, dh.to_vec())?);
        let base = g.constant_shared(cx.vanilla_logits.clone());
        let emb_t = g.constant_shared(self.emb_t.clone());
        let shift = g.matmul(dh_var, emb_t)?;
        let logits = g.add(base, shift)?;
        let lp = g.log_softmax(logits)?;

        let pi = g.constant_shared(cx.pi.clone());
        let log_pi = g.constant_shared(cx.log_pi.clone());
        let diff = g.sub(log_pi, lp)?;
        let weighted = g.mul(pi, diff)?;
        let kl = g.sum(weighted)?;

        let (gain, step_gain) = match self.inputs {
            ModeInputs::Emb {
                liberal_ind,
                conservative_ind,
                ..
            } => {
                let il = g.constant_shared(liberal_ind.clone());
                let ic = g.constant_shared(conservative_ind.clone());
                let acc = g.constant_shared(cx.hbar_logits.clone());
                let acc = g.add(acc, shift)?;
                let acc_lp = g.log_softmax(acc)?;
                let sl = g.matmul(acc_lp, il)?;
                let sl = g.sum(sl)?;
                let sl = g.scale(sl, -1.0)?;
                let sc = g.matmul(acc_lp, ic)?;
                let sc = g.sum(sc)?;
                let sc = g.scale(sc, -1.0)?;
                let sl2 = g.mul(sl, sl)?;
                let sc2 = g.mul(sc, sc)?;
                let sq = g.add(sl2, sc2)?;
                let gap = g.sub(sl, sc)?;
                let gap = g.abs(gap)?;
                (g.sub(sq, gap)?, None)
            }
            ModeInputs::Cls { .. } => {
                let vars: Vec<Var> = self.head_params.iter().map(|p| g.constant_shared(p.clone())).collect();
                let hbar = g.constant_shared(cx.hbar.clone());
                let x = g.add(hbar, dh_var)?;
                let hl = Mlp::graph_logits(&mut g, &vars, x)?;
                let hlp = g.log_softmax(hl)?;
                let y = usize::from(g.value(hlp).data()[1].exp() >= 0.5);
                let r = g.gather(hlp, &[y])?;
                let r = g.scale(r, -1.0)?;
                let (past_sum, n) = self.window_past(cx.past);
                let c = g.constant(Tensor::scalar(past_sum));
                let total = g.add(r, c)?;
                (g.scale(total, 1.0 / n as f64)?, Some(r))
            }
        };
        let picked = g.gather(lp, &[cx.action])?;
        let base_lp = g.constant(Tensor::scalar(cx.log_pi.data()[cx.action]));
        let log_ratio = g.sub(picked, base_lp)?;
        let ratio = g.exp(log_ratio)?;
        let rew = g.mul(ratio, gain)?;
        let weighted_rew = g.scale(rew, cx.lambda)?;
        let objective = g.sub(weighted_rew, kl)?;
        Ok(Evaluated {
            log_probs: g.value(lp).data().to_vec(),
            gain: g.value(gain).data()[0],
            step_gain: step_gain.map_or(0.0, |r| g.value(r).data()[0]),
            graph: g,
            dh: dh_var,
            objective,
        })
    }

    /// Gain and classifier step gain of the unperturbed state, evaluated
    /// without a graph.
    fn unperturbed_gain(&self, hbar: &[f64], past: &[f64]) -> Result<(f64, f64)> {
        match self.inputs {
            ModeInputs::Emb {
                liberal, conservative, ..
            } => {
                let lp = log_softmax(&self.lm.logits_from_hidden(hbar));
                let s = |ids: &[TokenId]| -ids.iter().map(|&i| lp[i]).sum::<f64>();
                Ok((mode1_gain(s(liberal), s(conservative)), 0.0))
            }
            ModeInputs::Cls { head } => {
                let r = mode2_step_gain(head.prob_c(hbar));
                let mut gains = past.to_vec();
                gains.push(r);
                Ok((mode2_gain(&gains, self.config.gamma, self.config.window)?, r))
            }
        }
    }

    /// One calibrated decoding step from `state`. `past` holds the earlier
    /// classifier step gains of this sequence; `u` is the step's uniform draw,
    /// shared by the vanilla action and the emitted token.
    pub fn step(&self, state: &DecodeState, lambda: f64, past: &[f64], u: f64, decode: &DecodeConfig) -> Result<StepOutcome> {
        if state.is_empty() {
            return Err(DebiasError::InvalidInput("calibration needs a non-empty context".into()));
        }
        let cfg = self.config;
        let logits = self.lm.logits_from_hidden(state.last_hidden());
        let pi = softmax(&logits);
        let log_pi = log_softmax(&logits);
        let action = sample_top_k(&pi, decode.top_k, decode.temperature, u);
        let hbar = state.accumulated();
        let next = |kl: f64| update_lambda(lambda, kl, cfg.sigma(), cfg.lambda_min, cfg.lambda_max);

        let vanilla_outcome = |reverted: bool, objective_initial: f64| -> Result<StepOutcome> {
            let (gain, r) = self.unperturbed_gain(&hbar, past)?;
            Ok(StepOutcome {
                token: action,
                vanilla_token: action,
                next_lambda: next(0.0),
                step_gain: r,
                entry: TraceEntry {
                    sample: 0,
                    step: 0,
                    lambda,
                    kl: 0.0,
                    gain,
                    reward: gain,
                    token_id: action,
                    vanilla_token_id: action,
                    reverted_flag: reverted,
                    objective_initial,
                    objective_final: objective_initial,
                },
            })
        };
        // With zero weight on the reward the objective is -KL, maximized at Δh = 0.
        if lambda == 0.0 {
            return vanilla_outcome(false, 0.0);
        }

        let d = state.last_hidden().len();
        let v = pi.len();
        let cx = StepContext {
            vanilla_logits: Arc::new(Tensor::matrix(1, v, logits)?),
            log_pi: Arc::new(Tensor::matrix(1, v, log_pi.clone())?),
            pi: Arc::new(Tensor::matrix(1, v, pi.clone())?),
            hbar_logits: Arc::new(Tensor::matrix(1, v, self.lm.logits_from_hidden(&hbar))?),
            hbar: Arc::new(Tensor::matrix(1, d, hbar.clone())?),
            action,
            lambda,
            past,
        };
        let mut dh = vec![0.0; d];
        let mut adam = AdamState::new(AdamConfig::with_learning_rate(cfg.learning_rate));
        let mut objective_initial = 0.0;
        let mut k = 0;
        let last = loop {
            let ev = match self.evaluate(&cx, &dh) {
                Ok(ev) => ev,
                Err(DebiasError::Autodiff(_)) => return vanilla_outcome(true, objective_initial),
                Err(e) => return Err(e),
            };
            let obj = ev.graph.value(ev.objective).data()[0];
            if k == 0 {
                objective_initial = obj;
            }
            if k == cfg.inner_steps {
                break ev;
            }
            let grad = match ev.graph.backward(ev.objective) {
                Ok(g) => g.get(ev.dh).expect("perturbation requires grad").to_vec(),
                Err(_) => return vanilla_outcome(true, objective_initial),
            };
            // Adam minimizes; ascend the objective.
            let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
            if adam.step(&mut [dh.as_mut_slice()], &[neg.as_slice()]).is_err() {
                return vanilla_outcome(true, objective_initial);
            }
            k += 1;
        };
        let objective_final = last.graph.value(last.objective).data()[0];
        let probs_d: Vec<f64> = last.log_probs.iter().map(|l| l.exp()).collect();
        let kl = autodiff::kl_categorical(&pi, &probs_d).map(|o| o.value).unwrap_or(f64::NAN);
        if !kl.is_finite() || !objective_final.is_finite() {
            return vanilla_outcome(true, objective_initial);
        }
        let token = sample_top_k(&probs_d, decode.top_k, decode.temperature, u);
        Ok(StepOutcome {
            token,
            vanilla_token: action,
            next_lambda: next(kl),
            step_gain: last.step_gain,
            entry: TraceEntry {
                sample: 0,
                step: 0,
                lambda,
                kl,
                gain: last.gain,
                reward: reward(probs_d[action], pi[action], last.gain),
                token_id: token,
                vanilla_token_id: action,
                reverted_flag: false,
                objective_initial,
                objective_final,
            },
        })
    }

    /// Calibrated counterpart of [`crate::lm::generate_vanilla`]: same seed
    /// handling, same stopping rule, one trace entry per emitted token.
    pub fn generate(
        &self,
        prompt: &[TokenId],
        max_new_tokens: usize,
        decode: &DecodeConfig,
        seed: u64,
    ) -> Result<(Vec<TokenId>, Vec<TraceEntry>)> {
        crate::lm::check_budget(self.lm, prompt, max_new_tokens)?;
        let mut sampler = StepSampler::new(seed);
        let mut st = self.lm.start();
        for &t in prompt {
            self.lm.push_token(&mut st, t)?;
        }
        let mut lambda = self.config.lambda0;
        let mut past = Vec::new();
        let mut tokens = Vec::with_capacity(max_new_tokens);
        let mut trace = Vec::with_capacity(max_new_tokens);
        while tokens.len() < max_new_tokens {
            let u = sampler.next_uniform();
            let mut out = self.step(&st, lambda, &past, u, decode)?;
            if out.token == EOT_ID {
                break;
            }
            out.entry.step = tokens.len();
            tokens.push(out.token);
            trace.push(out.entry);
            past.push(out.step_gain);
            lambda = out.next_lambda;
            if tokens.len() < max_new_tokens {
                self.lm.push_token(&mut st, out.token)?;
            }
        }
        Ok((tokens, trace))
    }
}

pub fn generate_debiased(
    lm: &TransformerLm,
    prompt: &[TokenId],
    max_new_tokens: usize,
    decode: &DecodeConfig,
    config: &CalibrationConfig,
    inputs: &ModeInputs,
    seed: u64,
) -> Result<(Vec<TokenId>, Vec<TraceEntry>)> {
    Calibrator::new(lm, inputs, config)?.generate(prompt, max_new_tokens, decode, seed)
}

pub fn write_trace(path: &Path, entries: &[TraceEntry]) -> Result<()> {
    let f = File::create(path).map_err(|e| DebiasError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for e in entries {
        writeln!(w, "{}", serde_json::to_string(e).expect("trace serializes")).map_err(|err| DebiasError::io(path, err))?;
    }
    w.flush().map_err(|e| DebiasError::io(path, e))
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceEntry>> {
    let f = File::open(path).map_err(|e| DebiasError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| DebiasError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| DebiasError::Parse {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}
