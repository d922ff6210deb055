//! Reinforced calibration of decoding.
//!
//! At every token step a perturbation `Δh` of the final hidden state is
//! optimized for `λ·R − KL(π ‖ π_d)`, where `π` is the vanilla next-token
//! distribution, `π_d` the perturbed one, and `R` the importance-weighted
//! debias gain of the vanilla action. `λ` adapts between steps so the
//! realized KL stays near the threshold `σ`.

mod decoder;
mod formulas;

use serde::{Deserialize, Serialize};

pub use decoder::{
    generate_debiased, read_trace, resolve_bias_words, write_trace, Calibrator, ModeInputs, StepOutcome, TraceEntry,
};
pub use formulas::{
    dist_to_word, mode1_gain, mode2_gain, mode2_step_gain, reward, update_lambda, PROB_CLAMP,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibrationMode {
    /// Gain from distances to the two bias-word lexicons.
    Emb,
    /// Gain from the debias head's class probability.
    Cls,
}

impl CalibrationMode {
    pub fn default_sigma(self) -> f64 {
        match self {
            CalibrationMode::Emb => 0.02,
            CalibrationMode::Cls => 0.05,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CalibrationMode::Emb => "emb",
            CalibrationMode::Cls => "cls",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    pub mode: CalibrationMode,
    pub lambda0: f64,
    /// KL threshold; `None` takes the mode's default.
    #[serde(default)]
    pub sigma: Option<f64>,
    pub inner_steps: usize,
    /// Backtracking window `τ`: the gain averages the last `τ + 1` steps.
    pub window: usize,
    pub gamma: f64,
    pub learning_rate: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl CalibrationConfig {
    pub fn new(mode: CalibrationMode) -> Self {
        Self {
            mode,
            lambda0: 0.6,
            sigma: None,
            inner_steps: 15,
            window: 5,
            gamma: 0.9,
            learning_rate: 0.005,
            lambda_min: 1e-3,
            lambda_max: 10.0,
        }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma.unwrap_or_else(|| self.mode.default_sigma())
    }

    /// Every violated invariant, in field order.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.lambda0 >= 0.0 && self.lambda0.is_finite()) {
            errs.push("lambda0 must be >= 0".to_string());
        }
        if !(self.sigma() > 0.0 && self.sigma().is_finite()) {
            errs.push("sigma must be > 0".to_string());
        }
        if self.inner_steps == 0 {
            errs.push("inner_steps (K) must be >= 1".to_string());
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            errs.push("gamma must be in (0,1)".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            errs.push("learning_rate must be > 0".to_string());
        }
        if !(self.lambda_min >= 0.0 && self.lambda_min <= self.lambda_max && self.lambda_max.is_finite()) {
            errs.push("lambda bounds must satisfy 0 <= lambda_min <= lambda_max".to_string());
        }
        errs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_sigma_follows_mode() {
        let e = CalibrationConfig::new(CalibrationMode::Emb);
        let c = CalibrationConfig::new(CalibrationMode::Cls);
        assert!(e.validate().is_empty() && c.validate().is_empty());
        assert_eq!((e.sigma(), c.sigma()), (0.02, 0.05));
    }

    #[test]
    fn every_violation_is_reported() {
        let mut c = CalibrationConfig::new(CalibrationMode::Cls);
        c.gamma = 1.2;
        c.inner_steps = 0;
        let errs = c.validate();
        assert_eq!(errs.len(), 2);
        assert!(errs.contains(&"gamma must be in (0,1)".to_string()));
    }
}
