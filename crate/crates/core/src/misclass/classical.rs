//! Scalar errors-in-variables attenuation, kept as a comparison point.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// `β · Var(x) / (Var(x) + Var(e))`.
///
/// Panics unless `x_variance > 0` and `error_variance ≥ 0`.
pub fn classical_attenuation_baseline(x_variance: f64, error_variance: f64, beta: f64) -> f64 {
    assert!(x_variance > 0.0 && error_variance >= 0.0, "variances must be positive");
    beta * x_variance / (x_variance + error_variance)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlopeEstimate {
    pub slope: f64,
    pub standard_error: f64,
}

/// Simple regression of `y = βx` on the noisy regressor `x + e`.
pub fn simulate_classical_attenuation(
    x_variance: f64,
    error_variance: f64,
    beta: f64,
    draws: usize,
    seed: u64,
) -> SlopeEstimate {
    assert!(draws >= 3, "need at least three draws");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xd = Normal::new(0.0, x_variance.sqrt()).expect("finite variance");
    let ed = Normal::new(0.0, error_variance.sqrt()).expect("finite variance");
    let mut w = Vec::with_capacity(draws);
    let mut y = Vec::with_capacity(draws);
    for _ in 0..draws {
        let x: f64 = xd.sample(&mut rng);
        let e: f64 = if error_variance > 0.0 { ed.sample(&mut rng) } else { 0.0 };
        w.push(x + e);
        y.push(beta * x);
    }
    let nf = draws as f64;
    let wm = w.iter().sum::<f64>() / nf;
    let ym = y.iter().sum::<f64>() / nf;
    let sxx: f64 = w.iter().map(|a| (a - wm) * (a - wm)).sum();
    let sxy: f64 = w.iter().zip(&y).map(|(a, b)| (a - wm) * (b - ym)).sum();
    let slope = sxy / sxx;
    let intercept = ym - slope * wm;
    let rss: f64 = w.iter().zip(&y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    SlopeEstimate { slope, standard_error: (rss / (nf - 2.0) / sxx).sqrt() }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_examples() {
        assert_eq!(classical_attenuation_baseline(2.5, 0.0, 3.0), 3.0);
        assert_eq!(classical_attenuation_baseline(1.0, 1.0, 2.0), 1.0);
        assert_eq!(classical_attenuation_baseline(1.0, 4.0, 0.0), 0.0);
    }

    #[test]
    fn simulation_matches_baseline() {
        let est = simulate_classical_attenuation(1.0, 1.0, 2.0, 100_000, 11);
        let want = classical_attenuation_baseline(1.0, 1.0, 2.0);
        assert!((est.slope - want).abs() <= 3.0 * est.standard_error, "{est:?}");
    }
}
