//! Sampling and log-density helpers shared by the generator and the samplers.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Open01};
use statrs::function::gamma::ln_gamma;

/// Natural log of a Gamma(shape, 1) draw. For `shape < 1` the draw is taken
/// as `Gamma(shape + 1) * U^(1/shape)` in log space, which keeps tiny shapes
/// from underflowing to zero.
pub fn ln_gamma_draw<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    if shape < 1.0 {
        let g = Gamma::new(shape + 1.0, 1.0)
            .expect("positive shape")
            .sample(rng);
        let u: f64 = Open01.sample(rng);
        g.ln() + u.ln() / shape
    } else {
        Gamma::new(shape, 1.0)
            .expect("positive shape")
            .sample(rng)
            .ln()
    }
}

/// Gamma draw with the given shape and rate (mean `shape / rate`).
pub fn gamma_shape_rate<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    (ln_gamma_draw(shape, rng) - rate.ln()).exp()
}

/// Dirichlet draw. Normalisation happens in log space, so rows with very
/// small concentrations still sum to one.
pub fn dirichlet<R: Rng + ?Sized>(concentration: &[f64], rng: &mut R) -> Vec<f64> {
    let logs: Vec<f64> = concentration
        .iter()
        .map(|&a| ln_gamma_draw(a, rng))
        .collect();
    softmax(&logs)
}

pub fn softmax(logs: &[f64]) -> Vec<f64> {
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    out
}

/// Index drawn from unnormalised weights.
pub fn categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    // rounding left u just past the end; take the last positive weight
    weights
        .iter()
        .rposition(|&w| w > 0.0)
        .unwrap_or(weights.len() - 1)
}

pub fn poisson_ln_pmf(y: f64, mean: f64) -> f64 {
    if mean <= 0.0 {
        return if y == 0.0 { 0.0 } else { f64::NEG_INFINITY };
    }
    y * mean.ln() - mean - ln_gamma(y + 1.0)
}

/// Log density of Dirichlet(concentration) at `x`.
pub fn dirichlet_ln_pdf(x: &[f64], concentration: &[f64]) -> f64 {
    let total: f64 = concentration.iter().sum();
    let mut out = ln_gamma(total);
    for (&xi, &a) in x.iter().zip(concentration) {
        out += (a - 1.0) * xi.ln() - ln_gamma(a);
    }
    out
}

/// Log density of Gamma(shape, rate) at `x`.
pub fn gamma_ln_pdf(x: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn tiny_concentration_rows_stay_on_simplex() {
        let mut rng = rng_from_seed(3);
        for _ in 0..100 {
            let x = dirichlet(&[1e-3; 5], &mut rng);
            let s: f64 = x.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(x.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }

    #[test]
    fn gamma_draw_moments() {
        let mut rng = rng_from_seed(11);
        let n = 200_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| gamma_shape_rate(0.5, 2.0, &mut rng))
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        // mean 0.25, sd 0.3536
        assert!((mean - 0.25).abs() < 3.0 * 0.3536 / (n as f64).sqrt() * 1.5);
    }

    #[test]
    fn poisson_pmf_matches_closed_form() {
        let p = poisson_ln_pmf(3.0, 2.0).exp();
        assert!((p - 8.0 * (-2.0f64).exp() / 6.0).abs() < 1e-14);
        assert_eq!(poisson_ln_pmf(0.0, 0.0), 0.0);
    }

    #[test]
    fn categorical_respects_zero_weights() {
        let mut rng = rng_from_seed(5);
        for _ in 0..1000 {
            assert_eq!(categorical(&[0.0, 2.0, 0.0], &mut rng), 1);
        }
    }
}
