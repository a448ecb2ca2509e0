//! Central finite differences for checking hand-written adjoints.

/// `|a - n| / max(|a|, |n|)` over whole vectors; 0 when both are zero.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central-difference derivative of `f` at `x` along each coordinate in `indices`.
pub fn numeric_grad(x: &mut [f64], indices: &[usize], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    indices
        .iter()
        .map(|&i| {
            let orig = x[i];
            x[i] = orig + eps;
            let fp = f(x);
            x[i] = orig - eps;
            let fm = f(x);
            x[i] = orig;
            (fp - fm) / (2.0 * eps)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_derivative() {
        let mut x = vec![1.0, 2.0];
        let g = numeric_grad(&mut x, &[0, 1], 1e-5, |v| v[0].powi(3) + v[0] * v[1]);
        assert!(relative_error(&g, &[3.0 + 2.0, 1.0]) < 1e-8);
        assert_eq!(x, vec![1.0, 2.0]);
    }
}
