//! Scalar loss primitives shared by the closed-form loss functions and the
//! autograd ops, so both evaluate the exact same arithmetic.

/// Probability clamp used by every log-loss in the crate.
pub const PROB_EPS: f64 = 1e-7;

#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-(t log p + (1 - t) log(1 - p))` on the clamped probability.
#[inline]
pub fn bce(p: f64, target: f64) -> f64 {
    let p = clamp_prob(p);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// Derivative of [`bce`] with respect to the unclamped probability. Zero where
/// the clamp is active.
#[inline]
pub fn bce_grad(p: f64, target: f64) -> f64 {
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
        return 0.0;
    }
    -(target / p - (1.0 - target) / (1.0 - p))
}

/// Weighted, summed binary cross-entropy. Slices must share a length.
pub fn weighted_bce_sum(probs: &[f64], targets: &[f64], weights: &[f64]) -> f64 {
    debug_assert_eq!(probs.len(), targets.len());
    debug_assert_eq!(probs.len(), weights.len());
    probs
        .iter()
        .zip(targets)
        .zip(weights)
        .map(|((&p, &t), &w)| w * bce(p, t))
        .sum()
}

/// Focal binary loss `-(1 - p_t)^gamma log p_t`.
#[inline]
pub fn focal_bce(p: f64, target: f64, gamma: f64) -> f64 {
    let p = clamp_prob(p);
    let pt = target * p + (1.0 - target) * (1.0 - p);
    -(1.0 - pt).powf(gamma) * pt.ln()
}

#[inline]
pub fn focal_bce_grad(p: f64, target: f64, gamma: f64) -> f64 {
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
        return 0.0;
    }
    let pt = target * p + (1.0 - target) * (1.0 - p);
    let dpt_dp = 2.0 * target - 1.0;
    let dl_dpt = if gamma == 0.0 {
        -1.0 / pt
    } else {
        gamma * (1.0 - pt).powf(gamma - 1.0) * pt.ln() - (1.0 - pt).powf(gamma) / pt
    };
    dl_dpt * dpt_dp
}

#[inline]
pub fn smooth_l1(x: f64, beta: f64) -> f64 {
    let a = x.abs();
    if a < beta {
        0.5 * a * a / beta
    } else {
        a - 0.5 * beta
    }
}

#[inline]
pub fn smooth_l1_grad(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        x / beta
    } else {
        x.signum()
    }
}

/// Numerically stable softmax of one row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of one probability row against a class index.
#[inline]
pub fn cross_entropy(posterior: &[f64], label: usize) -> f64 {
    -clamp_prob(posterior[label]).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_closed_forms() {
        assert!((bce(0.5, 0.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce(0.9, 1.0) + 0.9f64.ln()).abs() < 1e-12);
        assert!(bce(1.0, 1.0) < 1e-6);
    }

    #[test]
    fn bce_grad_matches_difference() {
        for &(p, t) in &[(0.3, 0.0), (0.8, 1.0), (0.55, 1.0)] {
            let h = 1e-6;
            let fd = (bce(p + h, t) - bce(p - h, t)) / (2.0 * h);
            assert!((fd - bce_grad(p, t)).abs() < 1e-6);
        }
    }

    #[test]
    fn focal_grad_matches_difference() {
        for &(p, t) in &[(0.3, 0.0), (0.8, 1.0), (0.55, 1.0)] {
            let h = 1e-6;
            let fd = (focal_bce(p + h, t, 2.0) - focal_bce(p - h, t, 2.0)) / (2.0 * h);
            assert!((fd - focal_bce_grad(p, t, 2.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn uniform_softmax_cross_entropy_is_log_k() {
        let post = softmax(&[0.0; 4]);
        assert!((cross_entropy(&post, 2) - 4f64.ln()).abs() < 1e-12);
    }
}
