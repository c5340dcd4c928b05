//! Simulation harness for the expectation identities.
//!
//! Each replicate sends every member of true class `k` to predicted class `j`
//! independently with probability `C[j][k]`, so the flows out of each column
//! are multinomial.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::regress::fit_cell_means;

use super::flows::{ConfusionMatrix, FlowCounts};

/// Sample mean, variance and standard error of the mean, per category.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub standard_error: Vec<f64>,
}

impl Moments {
    fn from_samples(samples: &[Vec<f64>], p: usize) -> Self {
        let m = samples.len() as f64;
        let mut mean = vec![0.0; p];
        for s in samples {
            for j in 0..p {
                mean[j] += s[j];
            }
        }
        mean.iter_mut().for_each(|x| *x /= m);
        let mut variance = vec![0.0; p];
        if samples.len() > 1 {
            for s in samples {
                for j in 0..p {
                    variance[j] += (s[j] - mean[j]).powi(2);
                }
            }
            variance.iter_mut().for_each(|x| *x /= m - 1.0);
        } else {
            variance.iter_mut().for_each(|x| *x = f64::NAN);
        }
        let standard_error = variance.iter().map(|v| (v / m).sqrt()).collect();
        Self { mean, variance, standard_error }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloSummary {
    /// `β̃` over replicates with every proxy class populated.
    pub beta: Moments,
    /// `ñ` over all replicates.
    pub counts: Moments,
    /// `ñ·β̃` (the per-class outcome total) over all replicates.
    pub signal_mass: Moments,
    pub used: usize,
    /// Replicates in which some proxy class came out empty.
    pub skipped: usize,
}

/// Column-wise multinomial draw via sequential conditional binomials.
pub fn sample_flows<R: Rng + ?Sized>(c: &ConfusionMatrix, n: &[u64], rng: &mut R) -> FlowCounts {
    let p = c.dim();
    let mut flows = FlowCounts::zeros(p);
    for (k, &nk) in n.iter().enumerate() {
        let mut remaining = nk;
        let mut mass = 1.0;
        for j in 0..p {
            if remaining == 0 {
                break;
            }
            let cjk = c.get(j, k);
            let x = if j + 1 == p {
                remaining
            } else {
                let q = if mass > 0.0 { (cjk / mass).clamp(0.0, 1.0) } else { 1.0 };
                Binomial::new(remaining, q).expect("probability in [0,1]").sample(rng)
            };
            flows.add(k, j, x);
            remaining -= x;
            mass -= cjk;
        }
    }
    flows
}

fn replicate_rng(seed: u64, replicate: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate as u64);
    rng
}

struct Draw {
    counts: Vec<f64>,
    mass: Vec<f64>,
    beta: Option<Vec<f64>>,
}

fn one_replicate(c: &ConfusionMatrix, n: &[u64], beta: &[f64], noise: Option<&Normal<f64>>, rng: &mut ChaCha8Rng) -> Draw {
    let p = c.dim();
    let flows = sample_flows(c, n, rng);
    let counts: Vec<f64> = flows.predicted_counts().iter().map(|&x| x as f64).collect();
    let populated = counts.iter().all(|&x| x > 0.0);
    match noise {
        None => {
            let mass: Vec<f64> =
                (0..p).map(|j| (0..p).map(|k| flows.flow(k, j) as f64 * beta[k]).sum()).collect();
            let beta_hat = populated.then(|| mass.iter().zip(&counts).map(|(m, c)| m / c).collect());
            Draw { counts, mass, beta: beta_hat }
        }
        Some(dist) => {
            let (true_labels, proxy_labels) = flows.to_label_pairs();
            let y: Vec<f64> = true_labels.iter().map(|&k| beta[k] + dist.sample(rng)).collect();
            let mut mass = vec![0.0; p];
            for (&j, v) in proxy_labels.iter().zip(&y) {
                mass[j] += v;
            }
            let beta_hat = if populated {
                Some(fit_cell_means(&proxy_labels, p, &y).expect("populated classes").coefficients)
            } else {
                None
            };
            Draw { counts, mass, beta: beta_hat }
        }
    }
}

/// Replicates run in parallel but each owns the ChaCha stream numbered by its
/// index under `seed`, and moments are reduced in replicate order, so the
/// result does not depend on scheduling.
pub fn mc_misclassification_oracle(
    c: &ConfusionMatrix,
    n: &[u64],
    beta: &[f64],
    noise_sd: f64,
    replicates: usize,
    seed: u64,
) -> Result<MonteCarloSummary> {
    let p = c.dim();
    if n.len() != p {
        return Err(Error::DimensionMismatch { expected: p, found: n.len() });
    }
    if beta.len() != p {
        return Err(Error::DimensionMismatch { expected: p, found: beta.len() });
    }
    if replicates == 0 {
        return Err(Error::InvalidConfig { field: "replicates".into(), reason: "must be at least 1".into() });
    }
    if !(noise_sd >= 0.0) || !noise_sd.is_finite() {
        return Err(Error::InvalidConfig { field: "noise_sd".into(), reason: "must be finite and nonnegative".into() });
    }
    let noise = (noise_sd > 0.0).then(|| Normal::new(0.0, noise_sd).expect("valid sd"));

    let draws: Vec<Draw> = (0..replicates)
        .into_par_iter()
        .map(|r| one_replicate(c, n, beta, noise.as_ref(), &mut replicate_rng(seed, r)))
        .collect();

    let counts: Vec<Vec<f64>> = draws.iter().map(|d| d.counts.clone()).collect();
    let mass: Vec<Vec<f64>> = draws.iter().map(|d| d.mass.clone()).collect();
    let betas: Vec<Vec<f64>> = draws.iter().filter_map(|d| d.beta.clone()).collect();
    let used = betas.len();
    Ok(MonteCarloSummary {
        beta: Moments::from_samples(&betas, p),
        counts: Moments::from_samples(&counts, p),
        signal_mass: Moments::from_samples(&mass, p),
        used,
        skipped: replicates - used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::misclass::expectation::{expected_counts, expected_signal_mass, roe_expected_beta};

    fn sym() -> ConfusionMatrix {
        ConfusionMatrix::from_rows(&[vec![0.9, 0.1], vec![0.1, 0.9]]).unwrap()
    }

    #[test]
    fn identity_returns_beta_exactly() {
        let s = mc_misclassification_oracle(&ConfusionMatrix::identity(3), &[5, 8, 2], &[1.5, -2.0, 0.25], 0.0, 200, 3)
            .unwrap();
        assert_eq!(s.used, 200);
        assert_eq!(s.beta.mean, vec![1.5, -2.0, 0.25]);
        assert_eq!(s.beta.variance, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn sampled_flows_preserve_column_totals() {
        let c = ConfusionMatrix::from_rows(&[
            vec![0.5, 0.2, 0.0],
            vec![0.3, 0.8, 0.1],
            vec![0.2, 0.0, 0.9],
        ])
        .unwrap();
        let mut rng = replicate_rng(9, 0);
        for _ in 0..50 {
            let f = sample_flows(&c, &[40, 17, 60], &mut rng);
            assert_eq!(f.true_counts(), vec![40, 17, 60]);
            assert_eq!(f.flow(1, 2), 0);
            assert_eq!(f.flow(2, 0), 0);
        }
    }

    #[test]
    fn expectation_identities_hold_within_three_se() {
        let c = sym();
        let n = [100u64, 100];
        let nf = [100.0, 100.0];
        let beta = [1.0, 3.0];
        let s = mc_misclassification_oracle(&c, &n, &beta, 0.0, 10_000, 42).unwrap();
        let cn = expected_counts(&c, &nf).unwrap();
        let cm = expected_signal_mass(&c, &nf, &beta).unwrap();
        for j in 0..2 {
            assert!((s.counts.mean[j] - cn[j]).abs() <= 3.0 * s.counts.standard_error[j]);
            assert!((s.signal_mass.mean[j] - cm[j]).abs() <= 3.0 * s.signal_mass.standard_error[j]);
        }
    }

    #[test]
    fn roe_within_three_se_at_large_n() {
        let c = sym();
        let s = mc_misclassification_oracle(&c, &[1000, 1000], &[1.0, 3.0], 0.0, 10_000, 7).unwrap();
        let roe = roe_expected_beta(&c, &[1000.0, 1000.0], &[1.0, 3.0]).unwrap();
        for j in 0..2 {
            assert!((s.beta.mean[j] - roe[j]).abs() <= 3.0 * s.beta.standard_error[j]);
        }
    }

    #[test]
    fn deterministic_and_noise_path_consistent() {
        let c = sym();
        let a = mc_misclassification_oracle(&c, &[30, 50], &[1.0, 3.0], 0.5, 300, 5).unwrap();
        let b = mc_misclassification_oracle(&c, &[30, 50], &[1.0, 3.0], 0.5, 300, 5).unwrap();
        assert_eq!(a, b);
        let other = mc_misclassification_oracle(&c, &[30, 50], &[1.0, 3.0], 0.5, 300, 6).unwrap();
        assert_ne!(a.beta.mean, other.beta.mean);
    }

    #[test]
    fn standard_error_follows_root_n() {
        let c = sym();
        let a = mc_misclassification_oracle(&c, &[100, 100], &[1.0, 3.0], 0.0, 4_000, 1).unwrap();
        let b = mc_misclassification_oracle(&c, &[100, 100], &[1.0, 3.0], 0.0, 16_000, 1).unwrap();
        for j in 0..2 {
            let ratio = a.beta.standard_error[j] / b.beta.standard_error[j];
            assert!((ratio - 2.0).abs() < 0.15, "ratio {ratio}");
        }
    }

    #[test]
    fn empty_classes_are_skipped() {
        // class 1 only receives members of class 1, and there are none
        let c = ConfusionMatrix::from_rows(&[vec![1.0, 0.5], vec![0.0, 0.5]]).unwrap();
        let s = mc_misclassification_oracle(&c, &[10, 0], &[1.0, 2.0], 0.0, 20, 0).unwrap();
        assert_eq!(s.used, 0);
        assert_eq!(s.skipped, 20);
        assert!(mc_misclassification_oracle(&c, &[10, 0], &[1.0, 2.0], 0.0, 0, 0).is_err());
    }
}
