//! Exact, sample-level decomposition of the proxy-label estimator.

use crate::error::{Error, Result};
use crate::regress::{fit_cell_means, shifted_means};

use super::flows::FlowCounts;

/// `β̃ = β̂ + bias + noise`, where `β̂ + bias` is the systematic (noise-free)
/// component obtained by regressing the true-label fitted values on the proxy
/// labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub beta_true: Vec<f64>,
    pub beta_proxy: Vec<f64>,
    pub systematic: Vec<f64>,
    pub bias: Vec<f64>,
    pub noise: Vec<f64>,
}

impl Decomposition {
    /// Largest `|β̃ − (β̂ + bias + noise)|`.
    pub fn identity_gap(&self) -> f64 {
        (0..self.beta_proxy.len())
            .map(|j| (self.beta_proxy[j] - (self.beta_true[j] + self.bias[j] + self.noise[j])).abs())
            .fold(0.0, f64::max)
    }
}

pub fn decompose_proxy_estimator(
    true_labels: &[usize],
    proxy_labels: &[usize],
    p: usize,
    y: &[f64],
) -> Result<Decomposition> {
    if true_labels.len() != proxy_labels.len() {
        return Err(Error::LengthMismatch { left: true_labels.len(), right: proxy_labels.len() });
    }
    let reported = fit_cell_means(true_labels, p, y)?;
    let proxy = fit_cell_means(proxy_labels, p, y)?;
    let (systematic, _) = shifted_means(proxy_labels, &reported.fitted, p);
    let bias = systematic.iter().zip(&reported.coefficients).map(|(s, b)| s - b).collect();
    let noise = proxy.coefficients.iter().zip(&systematic).map(|(b, s)| b - s).collect();
    Ok(Decomposition {
        beta_true: reported.coefficients,
        beta_proxy: proxy.coefficients,
        systematic,
        bias,
        noise,
    })
}

/// Per-category mixture of true effects induced by the flows.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    /// `((n_j − n_out,j) β_j + Σ_{k≠j} n_{k→j} β_k) / ñ_j`.
    pub coefficients: Vec<f64>,
    /// `coefficients − β`.
    pub bias: Vec<f64>,
}

pub fn mixture_coefficients(flows: &FlowCounts, beta: &[f64]) -> Result<Mixture> {
    let p = flows.dim();
    if beta.len() != p {
        return Err(Error::DimensionMismatch { expected: p, found: beta.len() });
    }
    let n = flows.true_counts();
    let n_out = flows.out_flows();
    let n_pred = flows.predicted_counts();
    let mut coefficients = Vec::with_capacity(p);
    for j in 0..p {
        if n_pred[j] == 0 {
            return Err(Error::EmptyPredictedClass(j));
        }
        let stay = (n[j] - n_out[j]) as f64 * beta[j];
        let inflow: f64 = (0..p).filter(|&k| k != j).map(|k| flows.flow(k, j) as f64 * beta[k]).sum();
        coefficients.push((stay + inflow) / n_pred[j] as f64);
    }
    let bias = coefficients.iter().zip(beta).map(|(m, b)| m - b).collect();
    Ok(Mixture { coefficients, bias })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::misclass::flows::flows_from_labels;

    /// 200 rows: 100 of class 0, 100 of class 1; the first ten of each class
    /// are swapped in the proxy labels.
    pub(crate) fn swap_example() -> (Vec<usize>, Vec<usize>) {
        let mut t = Vec::new();
        let mut q = Vec::new();
        for k in 0..2usize {
            for i in 0..100 {
                t.push(k);
                q.push(if i < 10 { 1 - k } else { k });
            }
        }
        (t, q)
    }

    #[test]
    fn perfect_proxy_has_no_bias_or_noise() {
        let (t, _) = swap_example();
        let y: Vec<f64> = t.iter().enumerate().map(|(i, &k)| k as f64 * 2.0 + (i % 7) as f64 * 0.3).collect();
        let d = decompose_proxy_estimator(&t, &t, 2, &y).unwrap();
        assert_eq!(d.bias, vec![0.0, 0.0]);
        assert_eq!(d.noise, vec![0.0, 0.0]);
        assert_eq!(d.beta_proxy, d.beta_true);
    }

    #[test]
    fn swap_example_systematic_component() {
        let (t, q) = swap_example();
        let y: Vec<f64> = t.iter().map(|&k| if k == 0 { 1.0 } else { 3.0 }).collect();
        let d = decompose_proxy_estimator(&t, &q, 2, &y).unwrap();

        // oracle: explicit group means of fitted values over the enumerated rows
        let fitted: Vec<f64> = t.iter().map(|&k| [1.0, 3.0][k]).collect();
        let mut sum = [0.0; 2];
        let mut cnt = [0.0; 2];
        for (f, &j) in fitted.iter().zip(&q) {
            sum[j] += f;
            cnt[j] += 1.0;
        }
        let oracle = [sum[0] / cnt[0], sum[1] / cnt[1]];
        assert!((oracle[0] - 1.2).abs() < 1e-12 && (oracle[1] - 2.8).abs() < 1e-12);
        for j in 0..2 {
            assert!((d.systematic[j] - oracle[j]).abs() < 1e-12);
        }
        assert!((d.bias[0] - 0.2).abs() < 1e-12 && (d.bias[1] + 0.2).abs() < 1e-12);
    }

    #[test]
    fn noisy_identity_holds() {
        let (t, q) = swap_example();
        let y: Vec<f64> = t
            .iter()
            .enumerate()
            .map(|(i, &k)| [1.0, 3.0][k] + ((i * 37 % 11) as f64 - 5.0) * 0.17)
            .collect();
        let d = decompose_proxy_estimator(&t, &q, 2, &y).unwrap();
        assert!(d.identity_gap() < 1e-9);

        // the noise term is the proxy-group mean of the true-label residuals
        let reported = fit_cell_means(&t, 2, &y).unwrap();
        let (resid_means, _) = shifted_means(&q, &reported.residuals, 2);
        for j in 0..2 {
            assert!((d.noise[j] - resid_means[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn mixture_examples() {
        let (t, q) = swap_example();
        let flows = flows_from_labels(&t, &q, 2).unwrap();
        let m = mixture_coefficients(&flows, &[1.0, 3.0]).unwrap();
        assert!((m.coefficients[0] - 1.2).abs() < 1e-12);
        assert!((m.coefficients[1] - 2.8).abs() < 1e-12);
        assert!((m.bias[0] - 0.2).abs() < 1e-12 && (m.bias[1] + 0.2).abs() < 1e-12);

        let id = flows_from_labels(&t, &t, 2).unwrap();
        assert_eq!(mixture_coefficients(&id, &[1.5, -2.0]).unwrap().coefficients, vec![1.5, -2.0]);

        // ñ_j m_j = Σ_k β_k n_{k→j}
        let beta = [0.4, -1.3];
        let m = mixture_coefficients(&flows, &beta).unwrap();
        let nt = flows.predicted_counts();
        for j in 0..2 {
            let rhs: f64 = (0..2).map(|k| beta[k] * flows.flow(k, j) as f64).sum();
            assert!((nt[j] as f64 * m.coefficients[j] - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn mixture_rejects_empty_predicted_class() {
        let f = flows_from_labels(&[0, 1], &[0, 0], 2).unwrap();
        assert_eq!(mixture_coefficients(&f, &[1.0, 2.0]).unwrap_err(), Error::EmptyPredictedClass(1));
    }
}
