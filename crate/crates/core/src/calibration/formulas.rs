use crate::{DebiasError, Result};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs
/// and ratios.
pub const PROB_CLAMP: f64 = 1e-12;

/// Distance of a word from the perturbed state: `-ln p(w)`.
pub fn dist_to_word(p_w: f64) -> f64 {
    -p_w.clamp(PROB_CLAMP, 1.0).ln()
}

/// Lexicon gain from the summed distances to the liberal and conservative
/// word lists: `S_L² + S_C² − |S_L − S_C|`.
pub fn mode1_gain(s_l: f64, s_c: f64) -> f64 {
    s_l * s_l + s_c * s_c - (s_l - s_c).abs()
}

/// Single-step classifier gain. `y` is the head's own rounded decision (ties
/// at 0.5 go to class 1), so the gain peaks at `ln 2` when `p = 0.5`.
pub fn mode2_step_gain(p: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if p >= 0.5 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Discounted mean of the last `window + 1` step gains (oldest first); the
/// divisor is the number of gains actually used.
pub fn mode2_gain(gains: &[f64], gamma: f64, window: usize) -> Result<f64> {
    if gains.is_empty() {
        return Err(DebiasError::InvalidInput("mode 2 gain needs at least one step gain".into()));
    }
    let used = &gains[gains.len().saturating_sub(window + 1)..];
    let t = used.len() - 1;
    let total: f64 = used.iter().enumerate().map(|(i, r)| gamma.powi((t - i) as i32) * r).sum();
    Ok(total / used.len() as f64)
}

/// Importance-weighted reward `(π_d(a) / π(a)) · D` of the vanilla action.
pub fn reward(pi_d: f64, pi: f64, gain: f64) -> f64 {
    pi_d.max(PROB_CLAMP) / pi.max(PROB_CLAMP) * gain
}

/// Halves `λ` when `kl ≥ 2σ`, doubles it when `kl ≤ σ/2`, then clamps.
pub fn update_lambda(lambda: f64, kl: f64, sigma: f64, lambda_min: f64, lambda_max: f64) -> f64 {
    let next = if kl >= 2.0 * sigma {
        lambda / 2.0
    } else if kl <= sigma / 2.0 {
        lambda * 2.0
    } else {
        lambda
    };
    next.clamp(lambda_min, lambda_max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distance_examples() {
        assert_eq!(dist_to_word(1.0), 0.0);
        assert!((dist_to_word((-2.0f64).exp()) - 2.0).abs() < 1e-12);
        assert!(dist_to_word(0.3) > dist_to_word(0.4));
    }

    #[test]
    fn gain_examples() {
        assert_eq!(mode1_gain(3.0, 4.0), 24.0);
        assert_eq!(mode1_gain(2.5, 2.5), 12.5);
        assert!((mode2_step_gain(0.5) - 2f64.ln()).abs() < 1e-12);
        assert!((mode2_step_gain(0.9) - 0.105_360_515_657_826_3).abs() < 1e-12);
        assert!((mode2_step_gain(0.1) - mode2_step_gain(0.9)).abs() < 1e-12);
        let d = mode2_gain(&[1.0, 0.5, 0.2], 0.9, 2).unwrap();
        assert!((d - (0.81 + 0.45 + 0.2) / 3.0).abs() < 1e-12);
        assert_eq!(mode2_gain(&[0.3, 0.7], 0.9, 0).unwrap(), 0.7);
        assert!(mode2_gain(&[], 0.9, 2).is_err());
    }

    #[test]
    fn truncated_window_divides_by_available_count() {
        let d = mode2_gain(&[1.0], 0.9, 5).unwrap();
        assert_eq!(d, 1.0);
    }

    #[test]
    fn reward_examples() {
        assert_eq!(reward(0.2, 0.4, 2.0), 1.0);
        assert_eq!(reward(0.3, 0.3, 0.7), 0.7);
        assert_eq!(reward(0.9, 0.1, 0.0), 0.0);
    }

    #[test]
    fn lambda_schedule() {
        assert_eq!(update_lambda(0.6, 0.05, 0.02, 1e-3, 10.0), 0.3);
        assert_eq!(update_lambda(0.6, 0.005, 0.02, 1e-3, 10.0), 1.2);
        assert_eq!(update_lambda(0.6, 0.02, 0.02, 1e-3, 10.0), 0.6);
        assert_eq!(update_lambda(8.0, 0.0, 0.02, 1e-3, 10.0), 10.0);
    }
}
