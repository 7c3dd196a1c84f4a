//! Central finite-difference gradient checking.
//!
//! The standard recipe used by every differentiable module: perturb one
//! coordinate at a time by `±h` (default 1e-5), take the centered quotient,
//! and compare against the recorded gradient with a guarded relative error
//! so near-zero gradients do not blow the ratio up.

/// Default step for central differences.
pub const DEFAULT_H: f64 = 1e-5;

/// Central finite-difference gradient of `f` at `x`.
///
/// `f` must be a pure function of the slice contents.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut work = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = work[i];
        work[i] = orig + h;
        let up = f(&work);
        work[i] = orig - h;
        let down = f(&work);
        work[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Guarded relative error between two gradient estimates.
///
/// `|a - n| / max(|a|, |n|, 1e-3)`: the floor keeps finite-difference noise
/// on true-zero gradients from registering as error while still catching
/// absolute defects above ~1e-7.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-3);
    (analytic - numeric).abs() / denom
}

/// Worst guarded relative error across two gradient vectors.
///
/// Panics if the lengths differ; that is a harness bug, not a numeric one.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Check `analytic` against central differences of `f` at `x`.
///
/// Returns the worst relative error; callers assert it against their
/// tolerance so failures print the observed value.
pub fn check_grad(f: impl FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64], h: f64) -> f64 {
    let numeric = central_diff(f, x, h);
    max_rel_err(analytic, &numeric)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let x = [1.0, -2.0, 0.5];
        let g = central_diff(f, &x, DEFAULT_H);
        let expect = [2.0, -4.0, 1.0];
        assert!(max_rel_err(&expect, &g) < 1e-9);
    }

    #[test]
    fn detects_wrong_gradient() {
        let f = |x: &[f64]| x[0] * x[0];
        let err = check_grad(f, &[3.0], &[5.0], DEFAULT_H);
        assert!(err > 0.1);
    }

    #[test]
    fn zero_gradient_is_quiet() {
        let f = |_: &[f64]| 42.0;
        let err = check_grad(f, &[1.0, 2.0], &[0.0, 0.0], DEFAULT_H);
        assert!(err < 1e-6);
    }
}
