use crate::error::{Error, Result};

/// Outcome of a central-difference gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub numeric: Vec<f64>,
    /// Per-component `|a − n| / max(|a|, |n|, 1e-8)`.
    pub rel_err: Vec<f64>,
    pub max_rel_err: f64,
    pub worst_index: Option<usize>,
}

impl GradCheckReport {
    /// Largest relative error over `range` of components.
    pub fn max_over(&self, range: std::ops::Range<usize>) -> f64 {
        self.rel_err[range].iter().copied().fold(0.0, f64::max)
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares `analytic` with `(f(x + h e_i) − f(x − h e_i)) / 2h` for every `i`.
pub fn finite_diff_gradcheck(mut f: impl FnMut(&[f64]) -> f64, x0: &[f64], analytic: &[f64], h: f64) -> Result<GradCheckReport> {
    if !(h > 0.0) {
        return Err(Error::invalid("gradcheck step must be positive"));
    }
    if analytic.len() != x0.len() {
        return Err(Error::shape("gradcheck", "gradient length", x0.len(), analytic.len()));
    }
    let mut x = x0.to_vec();
    let mut numeric = Vec::with_capacity(x0.len());
    for i in 0..x0.len() {
        x[i] = x0[i] + h;
        let fp = f(&x);
        x[i] = x0[i] - h;
        let fm = f(&x);
        x[i] = x0[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite("gradcheck objective"));
        }
        numeric.push((fp - fm) / (2.0 * h));
    }
    let rel_err: Vec<f64> = analytic.iter().zip(&numeric).map(|(&a, &n)| relative_error(a, n)).collect();
    let (worst_index, max_rel_err) = rel_err
        .iter()
        .copied()
        .enumerate()
        .fold((None, 0.0), |(bi, bv), (i, v)| if v > bv { (Some(i), v) } else { (bi, bv) });
    Ok(GradCheckReport {
        numeric,
        rel_err,
        max_rel_err,
        worst_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn square_at_three() {
        let r = finite_diff_gradcheck(|x| x[0] * x[0], &[3.0], &[6.0], 1e-5).unwrap();
        assert!(r.max_rel_err < 1e-8);
    }

    fn ortho(m: &[f64], k: usize, c: usize) -> (f64, Vec<f64>) {
        let mut a = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                let dot: f64 = (0..c).map(|t| m[i * c + t] * m[j * c + t]).sum();
                a[i * k + j] = if i == j { 1.0 } else { 0.0 } - dot;
            }
        }
        let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut g = vec![0.0; k * c];
        for i in 0..k {
            for t in 0..c {
                g[i * c + t] = -2.0 * (0..k).map(|j| a[i * k + j] * m[j * c + t]).sum::<f64>() / norm;
            }
        }
        (norm, g)
    }

    #[test]
    fn ortho_loss_on_random_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m: Vec<f64> = (0..32).map(|_| StandardNormal.sample(&mut rng)).collect();
        let (_, g) = ortho(&m, 4, 8);
        let r = finite_diff_gradcheck(|x| ortho(x, 4, 8).0, &m, &g, 1e-6).unwrap();
        assert!(r.max_rel_err < 1e-5, "{}", r.max_rel_err);
    }

    #[test]
    fn doubled_gradient_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let m: Vec<f64> = (0..32).map(|_| StandardNormal.sample(&mut rng)).collect();
            let g: Vec<f64> = ortho(&m, 4, 8).1.iter().map(|v| 2.0 * v).collect();
            let r = finite_diff_gradcheck(|x| ortho(x, 4, 8).0, &m, &g, 1e-6).unwrap();
            assert!(r.max_rel_err > 0.1);
            assert!((r.max_rel_err - 0.5).abs() < 1e-3);
        }
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        assert!(finite_diff_gradcheck(|x| x[0].ln(), &[0.0], &[1.0], 1e-3).is_err());
    }
}
