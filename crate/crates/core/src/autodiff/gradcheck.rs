//! Central finite-difference utilities for verifying reverse-mode gradients.
//!
//! These evaluate the objective as a black box and never touch the tape's
//! backward path, so they stay independent of the thing they check.

/// Central finite difference: df/dx_i ~= (f(x + h e_i) - f(x - h e_i)) / 2h.
pub fn finite_difference<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        out.push((up - down) / (2.0 * h));
    }
    out
}

/// Max relative error between an analytic gradient and a reference, with an
/// absolute floor so near-zero entries compare absolutely.
pub fn max_rel_err(analytic: &[f64], reference: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), reference.len());
    analytic
        .iter()
        .zip(reference)
        .map(|(&a, &r)| (a - r).abs() / r.abs().max(floor))
        .fold(0.0, f64::max)
}
