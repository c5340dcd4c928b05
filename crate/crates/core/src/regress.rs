//! Least squares for dummy-coded categorical designs.
//!
//! Two codings are supported: intercept-free cell means (one coefficient per
//! category, each a group mean) and reference coding (intercept plus a dummy
//! per non-reference category, optionally followed by control columns).

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::labels::check_labels;

/// Relative singular-value floor below which a design is treated as singular.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub enum Coding {
    CellMeans,
    Reference { reference: usize },
    /// An arbitrary user-supplied design.
    General,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignSpec {
    pub coding: Coding,
    pub control_columns: Vec<String>,
}

impl DesignSpec {
    pub fn cell_means() -> Self {
        Self { coding: Coding::CellMeans, control_columns: Vec::new() }
    }

    pub fn general() -> Self {
        Self { coding: Coding::General, control_columns: Vec::new() }
    }
}

#[derive(Debug, Clone)]
pub struct RegressionFit {
    pub coefficients: Vec<f64>,
    pub fitted: Vec<f64>,
    pub residuals: Vec<f64>,
    /// `RSS / (n - q)`; NaN when there are no residual degrees of freedom.
    pub residual_variance: f64,
    pub design: DesignSpec,
}

impl RegressionFit {
    pub fn rss(&self) -> f64 {
        self.residuals.iter().map(|r| r * r).sum()
    }

    pub fn residual_se(&self) -> f64 {
        self.residual_variance.sqrt()
    }
}

fn residual_variance(rss: f64, n: usize, q: usize) -> f64 {
    if n > q {
        rss / (n - q) as f64
    } else {
        f64::NAN
    }
}

/// Mean computed around the first element, so a constant group yields that
/// constant exactly.
pub(crate) fn shifted_means(labels: &[usize], values: &[f64], p: usize) -> (Vec<f64>, Vec<usize>) {
    let mut anchor = vec![f64::NAN; p];
    let mut dev = vec![0.0; p];
    let mut count = vec![0usize; p];
    for (&l, &v) in labels.iter().zip(values) {
        if count[l] == 0 {
            anchor[l] = v;
        } else {
            dev[l] += v - anchor[l];
        }
        count[l] += 1;
    }
    let means = (0..p)
        .map(|j| if count[j] == 0 { f64::NAN } else { anchor[j] + dev[j] / count[j] as f64 })
        .collect();
    (means, count)
}

/// Cell-means regression of `y` on category `labels` (values in `0..p`).
pub fn fit_cell_means(labels: &[usize], p: usize, y: &[f64]) -> Result<RegressionFit> {
    if labels.len() != y.len() {
        return Err(Error::LengthMismatch { left: labels.len(), right: y.len() });
    }
    check_labels(labels, p)?;
    let (coefficients, count) = shifted_means(labels, y, p);
    if let Some(j) = count.iter().position(|&c| c == 0) {
        return Err(Error::EmptyCategory(j));
    }
    let fitted: Vec<f64> = labels.iter().map(|&l| coefficients[l]).collect();
    let residuals: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
    let rss = residuals.iter().map(|r| r * r).sum();
    Ok(RegressionFit {
        residual_variance: residual_variance(rss, y.len(), p),
        coefficients,
        fitted,
        residuals,
        design: DesignSpec::cell_means(),
    })
}

/// Ordinary least squares via Householder QR.
///
/// The design must have full column rank: its smallest singular value must
/// exceed [`RANK_TOL`] times the largest.
pub fn fit_ols(design: &DMatrix<f64>, y: &[f64]) -> Result<RegressionFit> {
    let (n, q) = design.shape();
    if y.len() != n {
        return Err(Error::LengthMismatch { left: n, right: y.len() });
    }
    if q == 0 || n < q {
        return Err(Error::RankDeficient { columns: (n.min(q)..q).collect() });
    }
    let qr = design.clone().qr();
    let r = qr.r();
    check_rank(&r)?;

    let mut qty = DVector::from_column_slice(y);
    qr.q_tr_mul(&mut qty);
    let rhs = qty.rows(0, q).into_owned();
    let beta = r
        .solve_upper_triangular(&rhs)
        .ok_or_else(|| Error::RankDeficient { columns: weak_columns(&r) })?;

    let fitted_v = design * &beta;
    let fitted: Vec<f64> = fitted_v.iter().copied().collect();
    let residuals: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
    let rss = residuals.iter().map(|e| e * e).sum();
    Ok(RegressionFit {
        coefficients: beta.iter().copied().collect(),
        fitted,
        residuals,
        residual_variance: residual_variance(rss, n, q),
        design: DesignSpec::general(),
    })
}

/// Singular values of `R` equal those of the design.
fn check_rank(r: &DMatrix<f64>) -> Result<()> {
    let sv = r.clone().singular_values();
    let max = sv.iter().copied().fold(0.0_f64, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) || !(min > RANK_TOL * max) || !min.is_finite() {
        return Err(Error::RankDeficient { columns: weak_columns(r) });
    }
    Ok(())
}

/// Columns whose new direction (the diagonal of `R`) is negligible relative to
/// the largest; falls back to the single weakest column.
fn weak_columns(r: &DMatrix<f64>) -> Vec<usize> {
    let diag: Vec<f64> = (0..r.ncols()).map(|j| r[(j, j)].abs()).collect();
    let max = diag.iter().copied().fold(0.0_f64, f64::max);
    let weak: Vec<usize> =
        diag.iter().enumerate().filter(|(_, &d)| !(d > RANK_TOL * max)).map(|(j, _)| j).collect();
    if weak.is_empty() {
        let j = diag
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(j, _)| j)
            .unwrap_or(0);
        vec![j]
    } else {
        weak
    }
}

/// A named control covariate, one value per observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Control {
    pub name: String,
    pub values: Vec<f64>,
}

impl Control {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Self {
        Self { name: name.into(), values }
    }
}

/// Builds `[1, dummies for every category except reference, controls...]`.
pub fn reference_design(
    labels: &[usize],
    p: usize,
    reference: usize,
    controls: &[Control],
) -> Result<DMatrix<f64>> {
    let n = labels.len();
    if reference >= p {
        return Err(Error::CategoryOutOfRange { index: reference, len: p });
    }
    check_labels(labels, p)?;
    let mut count = vec![0usize; p];
    for &l in labels {
        count[l] += 1;
    }
    if let Some(j) = count.iter().position(|&c| c == 0) {
        return Err(Error::EmptyCategory(j));
    }
    for c in controls {
        if c.values.len() != n {
            return Err(Error::LengthMismatch { left: n, right: c.values.len() });
        }
    }
    let q = p + controls.len();
    let mut x = DMatrix::<f64>::zeros(n, q);
    for (i, &l) in labels.iter().enumerate() {
        x[(i, 0)] = 1.0;
        if l != reference {
            x[(i, dummy_column(l, reference))] = 1.0;
        }
        for (c, ctrl) in controls.iter().enumerate() {
            x[(i, p + c)] = ctrl.values[i];
        }
    }
    Ok(x)
}

fn dummy_column(category: usize, reference: usize) -> usize {
    if category < reference {
        category + 1
    } else {
        category
    }
}

/// Reference-coded fit with intercept and controls.
pub fn fit_reference(
    labels: &[usize],
    p: usize,
    reference: usize,
    controls: &[Control],
    y: &[f64],
) -> Result<RegressionFit> {
    let x = reference_design(labels, p, reference, controls)?;
    let mut fit = fit_ols(&x, y)?;
    fit.design = DesignSpec {
        coding: Coding::Reference { reference },
        control_columns: controls.iter().map(|c| c.name.clone()).collect(),
    };
    Ok(fit)
}

/// Extracts `category → coefficient relative to the reference` from a
/// reference-coded fit.
pub fn reference_contrasts(fit: &RegressionFit, p: usize) -> BTreeMap<usize, f64> {
    let Coding::Reference { reference } = fit.design.coding else {
        return BTreeMap::new();
    };
    (0..p)
        .filter(|&j| j != reference)
        .map(|j| (j, fit.coefficients[dummy_column(j, reference)]))
        .collect()
}

/// Disparity of every non-reference category after adjusting for `controls`.
pub fn adjusted_disparities(
    labels: &[usize],
    p: usize,
    controls: &[Control],
    y: &[f64],
    reference: usize,
) -> Result<BTreeMap<usize, f64>> {
    let fit = fit_reference(labels, p, reference, controls, y)?;
    Ok(reference_contrasts(&fit, p))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Solves a small dense system by Gaussian elimination with partial
    /// pivoting on the normal equations; an oracle independent of the QR path.
    pub(crate) fn normal_equations_oracle(cols: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
        let q = cols.len();
        let mut a = vec![vec![0.0; q + 1]; q];
        for i in 0..q {
            for j in 0..q {
                a[i][j] = cols[i].iter().zip(&cols[j]).map(|(x, z)| x * z).sum();
            }
            a[i][q] = cols[i].iter().zip(y).map(|(x, z)| x * z).sum();
        }
        for c in 0..q {
            let piv = (c..q).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
            a.swap(c, piv);
            for r in 0..q {
                if r != c {
                    let f = a[r][c] / a[c][c];
                    for k in c..=q {
                        a[r][k] -= f * a[c][k];
                    }
                }
            }
        }
        (0..q).map(|i| a[i][q] / a[i][i]).collect()
    }

    fn matrix(cols: &[Vec<f64>]) -> DMatrix<f64> {
        DMatrix::from_fn(cols[0].len(), cols.len(), |i, j| cols[j][i])
    }

    #[test]
    fn cell_means_examples() {
        let fit = fit_cell_means(&[0, 0, 1, 1], 2, &[1.0, 1.0, 3.0, 3.0]).unwrap();
        assert_eq!(fit.coefficients, vec![1.0, 3.0]);

        let fit = fit_cell_means(&[0, 1, 2, 1, 0], 3, &[0.7; 5]).unwrap();
        assert_eq!(fit.coefficients, vec![0.7; 3]);
        assert!(fit.residuals.iter().all(|&r| r == 0.0));

        // oracle: per-group summation
        let labels = [0, 0, 1];
        let y = [1.0, 2.0, 5.0];
        let mut sums = [0.0; 2];
        let mut counts = [0.0; 2];
        for (l, v) in labels.iter().zip(y) {
            sums[*l] += v;
            counts[*l] += 1.0;
        }
        let fit = fit_cell_means(&labels, 2, &y).unwrap();
        assert_eq!(fit.coefficients, vec![sums[0] / counts[0], sums[1] / counts[1]]);
        assert_eq!(fit.coefficients, vec![1.5, 5.0]);
    }

    #[test]
    fn cell_means_requires_every_category() {
        assert_eq!(fit_cell_means(&[0, 0, 2], 3, &[1.0, 2.0, 3.0]).unwrap_err(), Error::EmptyCategory(1));
        assert!(matches!(
            fit_cell_means(&[0, 1], 2, &[1.0]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn ols_exact_line() {
        let x: Vec<f64> = (0..7).map(|i| i as f64 * 0.5 - 1.0).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 + 3.0 * v).collect();
        let fit = fit_ols(&matrix(&[vec![1.0; 7], x]), &y).unwrap();
        assert!((fit.coefficients[0] - 2.0).abs() < 1e-10);
        assert!((fit.coefficients[1] - 3.0).abs() < 1e-10);
    }

    #[test]
    fn ols_duplicate_column_is_rank_deficient() {
        let x = vec![1.0, 2.0, 4.0, 8.0];
        let err = fit_ols(&matrix(&[vec![1.0; 4], x.clone(), x]), &[1.0, 2.0, 3.0, 4.0]).unwrap_err();
        assert_eq!(err, Error::RankDeficient { columns: vec![2] });
        assert!(err.is_numerical());
    }

    #[test]
    fn ols_matches_normal_equations_on_small_system() {
        let dummy = vec![0.0, 1.0, 0.0, 1.0, 1.0];
        let control = vec![0.3, -1.2, 2.5, 0.7, 1.1];
        let y = vec![1.0, 3.5, 2.2, 4.1, 3.0];
        let cols = vec![vec![1.0; 5], dummy, control];
        let expected = normal_equations_oracle(&cols, &y);
        let fit = fit_ols(&matrix(&cols), &y).unwrap();
        for (a, b) in fit.coefficients.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn two_group_disparity_is_mean_difference() {
        let labels = [0, 0, 1, 1, 1];
        let y = [2.0, 4.0, 7.0, 8.0, 9.0];
        let d = adjusted_disparities(&labels, 2, &[], &y, 1).unwrap();
        assert!((d[&0] - (3.0 - 8.0)).abs() < 1e-12);
        assert_eq!(d.len(), 1);
    }

    #[test]
    fn orthogonal_controls_leave_disparities_unchanged() {
        // control balanced within each group and centered: orthogonal to dummies
        let labels = [0, 0, 1, 1, 2, 2];
        let control = Control::new("c", vec![1.0, -1.0, 1.0, -1.0, 1.0, -1.0]);
        let y = [1.0, 2.0, 4.0, 3.0, 8.0, 6.5];
        let raw = adjusted_disparities(&labels, 3, &[], &y, 0).unwrap();
        let adj = adjusted_disparities(&labels, 3, &[control], &y, 0).unwrap();
        for (k, v) in &raw {
            assert!((v - adj[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn confounded_disparity_matches_oracle() {
        let labels = [0, 0, 0, 1, 1, 1, 2, 2];
        let c1 = vec![1.0, 2.0, 0.5, 3.0, 4.0, 2.5, 0.1, 1.7];
        let c2 = vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let y = [3.1, 4.0, 2.2, 7.5, 9.0, 6.1, 1.0, 4.4];
        let d1: Vec<f64> = labels.iter().map(|&l| (l == 1) as u8 as f64).collect();
        let d2: Vec<f64> = labels.iter().map(|&l| (l == 2) as u8 as f64).collect();
        let cols = vec![vec![1.0; 8], d1, d2, c1.clone(), c2.clone()];
        let oracle = normal_equations_oracle(&cols, &y);
        let got = adjusted_disparities(
            &labels,
            3,
            &[Control::new("c1", c1), Control::new("c2", c2)],
            &y,
            0,
        )
        .unwrap();
        assert!((got[&1] - oracle[1]).abs() < 1e-9);
        assert!((got[&2] - oracle[2]).abs() < 1e-9);
    }

    #[test]
    fn reference_design_rejects_empty_category() {
        assert_eq!(
            reference_design(&[0, 0, 2], 3, 0, &[]).unwrap_err(),
            Error::EmptyCategory(1)
        );
        assert!(reference_design(&[0, 1], 2, 5, &[]).is_err());
    }
}
