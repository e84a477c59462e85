//! Central finite-difference gradient verification used across the test
//! suites. The closure re-evaluates the full forward pass at perturbed
//! parameter values, so the check is independent of the backward-pass code.

/// Central finite differences of a scalar function at `x`.
pub fn finite_diff<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + eps;
        let hi = f(&xp);
        xp[i] = orig - eps;
        let lo = f(&xp);
        xp[i] = orig;
        out[i] = (hi - lo) / (2.0 * eps);
    }
    out
}

/// Worst relative error between an analytic gradient and finite differences;
/// the denominator is floored so near-zero gradients compare absolutely.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], abs_floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric.iter()) {
        let denom = a.abs().max(n.abs()).max(abs_floor);
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}

/// Asserts an analytic gradient against central differences.
///
/// `f` maps a flat parameter vector to the scalar loss. Panics with the worst
/// offending component when the relative error exceeds `rel_tol`.
pub fn assert_grad_close<F: FnMut(&[f64]) -> f64>(
    f: F,
    x: &[f64],
    analytic: &[f64],
    eps: f64,
    rel_tol: f64,
    what: &str,
) {
    let numeric = finite_diff(f, x, eps);
    let err = max_rel_error(analytic, &numeric, 1e-6);
    assert!(
        err <= rel_tol,
        "{what}: gradient mismatch, max rel err {err:.3e} > {rel_tol:.1e}\n analytic: {:?}\n numeric: {:?}",
        &analytic[..analytic.len().min(8)],
        &numeric[..numeric.len().min(8)],
    );
}
