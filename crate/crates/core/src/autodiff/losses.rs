//! Loss primitives shared by the pretraining, rollout, and reward paths.

use super::tape::{Tape, Var};

/// Epsilon used inside every logarithm.
pub const LOG_EPS: f64 = 1e-12;

/// Closed-form KL divergence between diagonal Gaussians given as
/// (mean, log-variance) tensors, summed over all dimensions:
/// 0.5 * sum( exp(ql - pl) + (qm - pm)^2 * exp(-pl) - 1 + (pl - ql) ).
pub fn gaussian_kl(tape: &mut Tape, q_mean: Var, q_logvar: Var, p_mean: Var, p_logvar: Var) -> Var {
    assert_eq!(tape.shape(q_mean), tape.shape(q_logvar), "gaussian_kl: q shapes");
    assert_eq!(tape.shape(p_mean), tape.shape(p_logvar), "gaussian_kl: p shapes");
    assert_eq!(tape.shape(q_mean), tape.shape(p_mean), "gaussian_kl: q vs p shapes");
    let dl = tape.sub(q_logvar, p_logvar);
    let ratio = tape.exp(dl);
    let dm = tape.sub(q_mean, p_mean);
    let dm2 = tape.square(dm);
    let npl = tape.neg(p_logvar);
    let pvar_inv = tape.exp(npl);
    let maha = tape.mul(dm2, pvar_inv);
    let a = tape.add(ratio, maha);
    let b = tape.sub(a, dl);
    let c = tape.add_scalar(b, -1.0);
    let s = tape.sum(c);
    tape.scale(s, 0.5)
}

/// -log softmax(logits)[target], computed via logsumexp for stability.
pub fn cross_entropy(tape: &mut Tape, logits: Var, target: usize) -> Var {
    let n = tape.value(logits).len();
    assert!(target < n, "cross_entropy: target {target} out of {n}");
    let lse = tape.logsumexp(logits);
    let picked = tape.gather(logits, &[target]);
    let picked = tape.reshape(picked, &[]);
    tape.sub(lse, picked)
}

/// Focal loss over a probability vector: -alpha * (1 - p_t)^gamma * ln(p_t),
/// with p_t clamped by `LOG_EPS` inside the logarithm.
pub fn focal_loss(tape: &mut Tape, probs: Var, target: usize, gamma: f64, alpha: f64) -> Var {
    let t = tape.value(probs);
    let n = t.len();
    assert!(target < n, "focal_loss: target {target} out of {n}");
    let total: f64 = t.data().iter().sum();
    assert!(
        t.data().iter().all(|&p| p >= 0.0) && (total - 1.0).abs() <= 1e-6,
        "focal_loss: probabilities must be nonnegative and sum to 1 (got {total})"
    );
    let p_t = tape.gather(probs, &[target]);
    let p_t = tape.reshape(p_t, &[]);
    let np = tape.neg(p_t);
    let one_minus = tape.add_scalar(np, 1.0);
    let modulator = tape.powf(one_minus, gamma);
    let log_p = tape.ln_eps(p_t, LOG_EPS);
    let prod = tape.mul(modulator, log_p);
    tape.scale(prod, -alpha)
}

/// Mean absolute coordinate difference over two equal-shape waypoint tensors.
pub fn l1_waypoints(tape: &mut Tape, predicted: Var, reference: Var) -> Var {
    assert_eq!(tape.shape(predicted), tape.shape(reference), "l1_waypoints: length mismatch");
    let d = tape.sub(predicted, reference);
    let a = tape.abs(d);
    tape.mean(a)
}
