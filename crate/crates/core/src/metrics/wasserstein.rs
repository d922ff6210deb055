use crate::{DebiasError, Result};

fn sorted(xs: &[f64], which: &str) -> Result<Vec<f64>> {
    if xs.is_empty() {
        return Err(DebiasError::InvalidInput(format!("w2_distance: {which} sample set is empty")));
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(DebiasError::InvalidInput(format!("w2_distance: {which} holds a non-finite value")));
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// Wasserstein-2 distance between two empirical distributions on the line.
///
/// Integrates the squared gap between the two step quantile functions
/// exactly, over the merged breakpoints `i/n` and `j/m`, so sets of
/// different sizes compare without a grid.
pub fn w2_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    let (a, b) = (sorted(a, "first")?, sorted(b, "second")?);
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut pos = 0.0;
    let mut acc = 0.0;
    while i < n && j < m {
        // Compare (i+1)/n with (j+1)/m in integers.
        let (lhs, rhs) = ((i + 1) * m, (j + 1) * n);
        let end = if lhs <= rhs { (i + 1) as f64 / n as f64 } else { (j + 1) as f64 / m as f64 };
        let gap = a[i] - b[j];
        acc += (end - pos) * gap * gap;
        pos = end;
        if lhs <= rhs {
            i += 1;
        }
        if rhs <= lhs {
            j += 1;
        }
    }
    Ok(acc.max(0.0).sqrt())
}

/// Grid approximation: both quantile functions sampled at the midpoints
/// `(j - 0.5) / grid`, then the root-mean-square gap.
pub fn w2_distance_on_grid(a: &[f64], b: &[f64], grid: usize) -> Result<f64> {
    if grid == 0 {
        return Err(DebiasError::InvalidInput("w2 grid must have at least one point".into()));
    }
    let (a, b) = (sorted(a, "first")?, sorted(b, "second")?);
    let q = |xs: &[f64], p: f64| {
        let idx = ((p * xs.len() as f64).ceil() as usize).clamp(1, xs.len());
        xs[idx - 1]
    };
    let total: f64 = (1..=grid)
        .map(|j| {
            let p = (j as f64 - 0.5) / grid as f64;
            let d = q(&a, p) - q(&b, p);
            d * d
        })
        .sum();
    Ok((total / grid as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_examples() {
        assert_eq!(w2_distance(&[0.3, 0.1], &[0.1, 0.3]).unwrap(), 0.0);
        assert!((w2_distance(&[0.2, 0.4, 0.6], &[0.3, 0.5, 0.7]).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(w2_distance(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
    }

    #[test]
    fn four_point_grid_example() {
        let g = w2_distance_on_grid(&[0.9, 0.9], &[0.1, 0.1, 0.9, 0.9], 4).unwrap();
        assert!((g - 0.32f64.sqrt()).abs() < 1e-12);
        let exact = w2_distance(&[0.9, 0.9], &[0.1, 0.1, 0.9, 0.9]).unwrap();
        assert!((g - exact).abs() < 1e-12);
    }

    #[test]
    fn unequal_sizes() {
        // Quantile of [0,1] is 0 on (0,1/2], 1 after; [0.5] is 0.5 throughout.
        assert!((w2_distance(&[0.0, 1.0], &[0.5]).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_is_an_error() {
        assert!(w2_distance(&[], &[0.1]).is_err());
        assert!(w2_distance(&[0.1], &[]).is_err());
    }
}
