//! Central finite-difference oracle for validating analytic gradients.
//!
//! Independent of the tape: it only evaluates a scalar-valued closure at
//! perturbed inputs, so it can never share a bug with the backward pass it
//! checks.

/// Central-difference gradient of `f` at `x`: `(f(x+he_i) - f(x-he_i)) / 2h`
/// for every coordinate.
pub fn central_diff_grad<F>(mut f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut work = x.to_vec();
    let mut out = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = work[i];
        work[i] = orig + step;
        let fp = f(&work);
        work[i] = orig - step;
        let fm = f(&work);
        work[i] = orig;
        out[i] = (fp - fm) / (2.0 * step);
    }
    out
}

/// Largest elementwise relative error between two gradients, with an
/// absolute floor below which disagreements are ignored (both near zero).
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        let scale = a.abs().max(n.abs());
        if scale < floor {
            continue;
        }
        worst = worst.max((a - n).abs() / scale);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        // f(x) = sum x_i^2, grad = 2x.
        let x = [1.0, -2.0, 0.5];
        let g = central_diff_grad(|v| v.iter().map(|a| a * a).sum(), &x, 1e-6);
        for (gi, xi) in g.iter().zip(x.iter()) {
            assert!((gi - 2.0 * xi).abs() < 1e-8);
        }
    }

    #[test]
    fn rel_err_ignores_tiny_pairs() {
        let a = [1.0, 1e-12];
        let n = [1.0 + 1e-7, -1e-12];
        assert!(max_rel_err(&a, &n, 1e-8) < 1e-6);
    }
}
