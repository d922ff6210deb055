use crate::error::AutodiffError;
use crate::Result;

/// Floor applied to `q_i` when `p_i > 0` and `q_i == 0`.
pub const KL_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlOutcome {
    pub value: f64,
    /// Set when some `q_i` had to be clamped to [`KL_CLAMP`].
    pub clamped: bool,
}

/// `KL(p || q) = Σ p_i ln(p_i / q_i)` with `0 · ln(0 / q) = 0`.
pub fn kl_categorical(p: &[f64], q: &[f64]) -> Result<KlOutcome> {
    if p.len() != q.len() || p.is_empty() {
        return Err(AutodiffError::ShapeMismatch {
            op: "kl_categorical",
            shapes: vec![vec![p.len()], vec![q.len()]],
        });
    }
    for (name, v) in [("p", p), ("q", q)] {
        if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(AutodiffError::InvalidArgument(format!(
                "kl_categorical: {name} has negative or non-finite entries"
            )));
        }
        let total: f64 = v.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(AutodiffError::InvalidArgument(format!(
                "kl_categorical: {name} sums to {total}"
            )));
        }
    }
    let mut clamped = false;
    let mut value = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        let qi = if qi == 0.0 {
            clamped = true;
            KL_CLAMP
        } else {
            qi
        };
        value += pi * (pi / qi).ln();
    }
    // Rounding can leave tiny negatives for nearly equal inputs.
    Ok(KlOutcome {
        value: value.max(0.0),
        clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_distributions_have_zero_divergence() {
        let p = [0.2, 0.3, 0.5];
        let out = kl_categorical(&p, &p).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(!out.clamped);
    }

    #[test]
    fn point_mass_against_uniform_is_ln2() {
        let out = kl_categorical(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((out.value - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn zero_denominator_is_clamped_and_flagged() {
        let out = kl_categorical(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!(out.clamped);
        let expected = 0.5 * (0.5f64).ln() + 0.5 * (0.5 / KL_CLAMP).ln();
        assert!((out.value - expected).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_distributions() {
        assert!(kl_categorical(&[0.5, 0.6], &[0.5, 0.5]).is_err());
        assert!(kl_categorical(&[1.0], &[0.5, 0.5]).is_err());
        assert!(kl_categorical(&[-0.5, 1.5], &[0.5, 0.5]).is_err());
    }
}
