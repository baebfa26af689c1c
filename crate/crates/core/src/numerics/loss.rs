/// Lower clamp for probabilities entering a logarithm.
pub const PROB_EPS: f64 = 1e-7;

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Huber-style smooth L1: quadratic inside `|r| < beta`, linear outside.
pub fn smooth_l1(r: f64, beta: f64) -> f64 {
    debug_assert!(beta > 0.0);
    let a = r.abs();
    if a < beta {
        0.5 * r * r / beta
    } else {
        a - 0.5 * beta
    }
}

/// Derivative of [`smooth_l1`] with respect to `r`.
pub fn smooth_l1_grad(r: f64, beta: f64) -> f64 {
    if r.abs() < beta {
        r / beta
    } else {
        r.signum()
    }
}

/// Binary focal loss `−α_t (1 − p_t)^γ ln p_t` with `p` clamped to `[1e-7, 1 − 1e-7]`.
pub fn focal_loss(p: f64, target: bool, alpha: f64, gamma: f64) -> f64 {
    let p = clamp_prob(p);
    let (p_t, alpha_t) = if target { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
    -alpha_t * (1.0 - p_t).powf(gamma) * p_t.ln()
}

/// Binary cross-entropy against a soft target in `[0, 1]`.
pub fn binary_cross_entropy(p: f64, target: f64) -> f64 {
    let p = clamp_prob(p);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// `−ln softmax(logits)[target]`.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> f64 {
    super::ops::log_sum_exp(logits) - logits[target]
}

pub fn l2_norm(v: &[f64]) -> f64 {
    l2_norm_sq(v).sqrt()
}

pub fn l2_norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Euclidean distance between two equal-length vectors.
pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Reduction applied to a residual vector: plain or squared Euclidean norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NormKind {
    #[default]
    Plain,
    Squared,
}

impl NormKind {
    pub fn apply(self, residual: &[f64]) -> f64 {
        match self {
            NormKind::Plain => l2_norm(residual),
            NormKind::Squared => l2_norm_sq(residual),
        }
    }

    /// Gradient of `apply` with respect to the residual, written into `out`.
    /// The plain norm's subgradient at zero is taken as zero.
    pub fn grad(self, residual: &[f64], out: &mut [f64]) {
        match self {
            NormKind::Plain => {
                let n = l2_norm(residual);
                for (o, r) in out.iter_mut().zip(residual) {
                    *o = if n > 0.0 { r / n } else { 0.0 };
                }
            }
            NormKind::Squared => {
                for (o, r) in out.iter_mut().zip(residual) {
                    *o = 2.0 * r;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn smooth_l1_examples() {
        assert_eq!(smooth_l1(0.0, 1.0), 0.0);
        assert_eq!(smooth_l1(0.5, 1.0), 0.125);
        assert_eq!(smooth_l1(2.0, 1.0), 1.5);
        assert_eq!(smooth_l1(-2.0, 1.0), 1.5);
    }

    #[test]
    fn smooth_l1_is_c1_at_beta() {
        for beta in [1.0f64 / 9.0, 0.5, 1.0, 3.0] {
            let below = beta * (1.0 - 1e-15);
            let left = 0.5 * beta * beta / beta;
            let right = beta - 0.5 * beta;
            assert!((left - right).abs() < 1e-12);
            assert!((smooth_l1(below, beta) - smooth_l1(beta, beta)).abs() < 1e-12);
            assert!((smooth_l1_grad(below, beta) - smooth_l1_grad(beta, beta)).abs() < 1e-12);
        }
    }

    #[test]
    fn focal_examples() {
        assert!((focal_loss(0.5, true, 1.0, 0.0) - 2f64.ln()).abs() < 1e-15);
        assert!(focal_loss(1.0 - 1e-12, true, 0.25, 2.0) < 1e-12);
        assert!((focal_loss(0.5, true, 0.25, 2.0) - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-15);
        assert!((focal_loss(0.5, true, 0.25, 2.0) - 0.04332).abs() < 1e-5);
        assert!(focal_loss(0.0, true, 0.25, 2.0).is_finite());
    }

    #[test]
    fn cross_entropies() {
        assert!((binary_cross_entropy(0.5, 1.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softmax_cross_entropy(&[0.0, 0.0], 1) - 2f64.ln()).abs() < 1e-15);
        assert!(binary_cross_entropy(1.0, 1.0) < 1e-6);
    }

    #[test]
    fn plain_norm_grad_is_zero_at_zero() {
        let mut g = [1.0; 3];
        NormKind::Plain.grad(&[0.0; 3], &mut g);
        assert_eq!(g, [0.0; 3]);
    }

    proptest! {
        #[test]
        fn smooth_l1_grad_matches_difference_quotient(r in -5.0f64..5.0, beta in 0.05f64..2.0) {
            prop_assume!((r.abs() - beta).abs() > 1e-3);
            let h = 1e-6;
            let fd = (smooth_l1(r + h, beta) - smooth_l1(r - h, beta)) / (2.0 * h);
            prop_assert!((fd - smooth_l1_grad(r, beta)).abs() < 1e-6);
        }
    }
}
