use crate::error::AutodiffError;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

/// Adam optimizer state for a fixed list of parameter buffers.
///
/// Moment buffers are allocated on the first step and must keep matching the
/// parameter lengths afterwards.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step_count: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One bias-corrected Adam update, descending along `grads`.
    ///
    /// Nothing is modified when any gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(AutodiffError::InvalidArgument(format!(
                "adam: {} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "adam_step",
                    shapes: vec![vec![p.len()], vec![g.len()]],
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(AutodiffError::NonFiniteGradient(i));
            }
        }
        if self.step_count == 0 && self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second_moment = self.first_moment.clone();
        }
        let lengths_match = self.first_moment.len() == params.len()
            && self.first_moment.iter().zip(params.iter()).all(|(m, p)| m.len() == p.len());
        if !lengths_match {
            return Err(AutodiffError::InvalidArgument(
                "adam: parameter layout changed between steps".into(),
            ));
        }

        self.step_count += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_gradient_moves_by_learning_rate() {
        let mut adam = AdamState::new(AdamConfig::default());
        let mut p = vec![0.5];
        adam.step(&mut [&mut p], &[&[1.0]]).unwrap();
        // m_hat = 1, v_hat = 1, so the step is lr / (1 + eps).
        let expected = 0.5 - 1e-3 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut adam = AdamState::new(AdamConfig::default());
        let mut p = vec![1.25, -3.0];
        adam.step(&mut [&mut p], &[&[0.0, 0.0]]).unwrap();
        assert_eq!(p, vec![1.25, -3.0]);
    }

    #[test]
    fn constant_gradient_gives_equal_bias_corrected_steps() {
        let mut adam = AdamState::new(AdamConfig::default());
        let mut p = vec![0.0];
        adam.step(&mut [&mut p], &[&[0.3]]).unwrap();
        let first = -p[0];
        adam.step(&mut [&mut p], &[&[0.3]]).unwrap();
        let second = -p[0] - first;
        assert!((first - second).abs() < 1e-10, "{first} vs {second}");
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_side_effects() {
        let mut adam = AdamState::new(AdamConfig::default());
        let mut p = vec![1.0];
        let err = adam.step(&mut [&mut p], &[&[f64::NAN]]).unwrap_err();
        assert_eq!(err, AutodiffError::NonFiniteGradient(0));
        assert_eq!(p, vec![1.0]);
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let mut adam = AdamState::new(AdamConfig::default());
        let mut p = vec![1.0, 2.0];
        assert!(adam.step(&mut [&mut p], &[&[1.0]]).is_err());
    }
}
