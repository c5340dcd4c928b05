//! Neutrality, detailed balance and variance shrinkage.

use crate::error::{Error, Result};

use super::flows::ConfusionMatrix;
use super::jacobi::jacobi_eigen;

/// Default tolerance for the reversibility test inside [`shrinkage_report`]
/// and for the spectral checks.
pub const STRUCTURE_TOL: f64 = 1e-9;

fn check_dims(c: &ConfusionMatrix, v: &[f64]) -> Result<()> {
    if v.len() != c.dim() {
        return Err(Error::DimensionMismatch { expected: c.dim(), found: v.len() });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neutrality {
    pub neutral: bool,
    /// `max_j |(Cn)_j − n_j|`.
    pub max_deviation: f64,
}

/// Every category keeps its expected total: `|(Cn)_j − n_j| ≤ tol·n_j`.
pub fn check_neutrality(c: &ConfusionMatrix, n: &[f64], tol: f64) -> Result<Neutrality> {
    let cn = c.mul_vec(n)?;
    let mut neutral = true;
    let mut max_deviation: f64 = 0.0;
    for (got, want) in cn.iter().zip(n) {
        let d = (got - want).abs();
        neutral &= d <= tol * want;
        max_deviation = max_deviation.max(d);
    }
    Ok(Neutrality { neutral, max_deviation })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetailedBalance {
    pub reversible: bool,
    /// `max_{j,k} |C_jk n_k − C_kj n_j|`.
    pub max_violation: f64,
    /// `M = diag(n)^{-1/2} C diag(n)^{1/2}` symmetric at the matching scale.
    pub similarity_symmetric: bool,
}

/// `M_jk = C_jk √(n_k / n_j)`.
pub fn similarity_matrix(c: &ConfusionMatrix, n: &[f64]) -> Result<Vec<Vec<f64>>> {
    check_dims(c, n)?;
    if let Some(k) = n.iter().position(|&x| !(x > 0.0)) {
        return Err(Error::EmptyTrueClass(k));
    }
    let p = c.dim();
    Ok((0..p).map(|j| (0..p).map(|k| c.get(j, k) * (n[k] / n[j]).sqrt()).collect()).collect())
}

/// `C_jk n_k = C_kj n_j` for all pairs, within `tol·max(n)`.
///
/// The symmetry test on `M` uses `tol·max(n)/√(n_j n_k)` per pair, which is
/// the same condition after the similarity scaling, so the two flags agree.
pub fn check_detailed_balance(c: &ConfusionMatrix, n: &[f64], tol: f64) -> Result<DetailedBalance> {
    let m = similarity_matrix(c, n)?;
    let p = c.dim();
    let scale = n.iter().copied().fold(0.0, f64::max);
    let mut reversible = true;
    let mut similarity_symmetric = true;
    let mut max_violation: f64 = 0.0;
    for j in 0..p {
        for k in (j + 1)..p {
            let v = (c.get(j, k) * n[k] - c.get(k, j) * n[j]).abs();
            max_violation = max_violation.max(v);
            reversible &= v <= tol * scale;
            let ms = (m[j][k] - m[k][j]).abs();
            similarity_symmetric &= ms <= tol * scale / (n[j] * n[k]).sqrt();
        }
    }
    Ok(DetailedBalance { reversible, max_violation, similarity_symmetric })
}

/// Effects and counts with their count-weighted centring.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupEffects {
    pub beta: Vec<f64>,
    pub n: Vec<f64>,
    pub signal_mass: Vec<f64>,
    pub weighted_mean: f64,
    /// `n·β − β̄ n`; sums to zero.
    pub centered: Vec<f64>,
}

impl GroupEffects {
    pub fn new(n: &[f64], beta: &[f64]) -> Result<Self> {
        if n.len() != beta.len() {
            return Err(Error::LengthMismatch { left: n.len(), right: beta.len() });
        }
        let total: f64 = n.iter().sum();
        let signal_mass: Vec<f64> = n.iter().zip(beta).map(|(a, b)| a * b).collect();
        let weighted_mean = signal_mass.iter().sum::<f64>() / total;
        let centered = n.iter().zip(beta).map(|(a, b)| a * (b - weighted_mean)).collect();
        Ok(Self { beta: beta.to_vec(), n: n.to_vec(), signal_mass, weighted_mean, centered })
    }
}

/// `uᵀ diag(n)⁻¹ u`.
pub fn weighted_norm_sq(u: &[f64], n: &[f64]) -> f64 {
    u.iter().zip(n).map(|(x, w)| x * x / w).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShrinkageReport {
    pub ss_true: f64,
    pub ss_proxy: f64,
    pub similarity: Vec<Vec<f64>>,
    /// Present only for reversible `C`, sorted descending.
    pub eigenvalues: Option<Vec<f64>>,
    pub neutral: bool,
    pub reversible: bool,
    /// All `|λ| ≤ 1 + 1e-9` and `λ_max = 1` within 1e-9.
    pub spectrum_ok: Option<bool>,
}

impl ShrinkageReport {
    pub fn shrinks(&self) -> bool {
        self.ss_proxy <= self.ss_true * (1.0 + STRUCTURE_TOL)
    }
}

pub fn shrinkage_report(c: &ConfusionMatrix, n: &[f64], beta: &[f64]) -> Result<ShrinkageReport> {
    check_dims(c, beta)?;
    let similarity = similarity_matrix(c, n)?;
    let effects = GroupEffects::new(n, beta)?;
    let cw = c.mul_vec(&effects.centered)?;
    let ss_true = weighted_norm_sq(&effects.centered, n);
    let ss_proxy = weighted_norm_sq(&cw, n);

    let neutral = check_neutrality(c, n, STRUCTURE_TOL)?.neutral;
    let reversible = check_detailed_balance(c, n, STRUCTURE_TOL)?.reversible;
    let (eigenvalues, spectrum_ok) = if reversible {
        let values = jacobi_eigen(&similarity).values;
        let bounded = values.iter().all(|l| l.abs() <= 1.0 + STRUCTURE_TOL);
        let top = (values[0] - 1.0).abs() <= STRUCTURE_TOL;
        (Some(values), Some(bounded && top))
    } else {
        (None, None)
    };
    Ok(ShrinkageReport { ss_true, ss_proxy, similarity, eigenvalues, neutral, reversible, spectrum_ok })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sym() -> ConfusionMatrix {
        ConfusionMatrix::from_rows(&[vec![0.9, 0.1], vec![0.1, 0.9]]).unwrap()
    }

    #[test]
    fn neutrality_examples() {
        let id = check_neutrality(&ConfusionMatrix::identity(3), &[1.0, 2.0, 3.0], 1e-12).unwrap();
        assert!(id.neutral);
        assert_eq!(id.max_deviation, 0.0);
        assert!(check_neutrality(&sym(), &[100.0, 100.0], 1e-12).unwrap().neutral);

        let c = ConfusionMatrix::from_rows(&[vec![1.0, 0.5], vec![0.0, 0.5]]).unwrap();
        let r = check_neutrality(&c, &[100.0, 100.0], 1e-9).unwrap();
        assert!(!r.neutral);
        assert!((r.max_deviation - 50.0).abs() < 1e-12);
    }

    #[test]
    fn detailed_balance_examples() {
        let id = check_detailed_balance(&ConfusionMatrix::identity(2), &[3.0, 8.0], 1e-9).unwrap();
        assert!(id.reversible && id.similarity_symmetric);
        let s = check_detailed_balance(&sym(), &[100.0, 100.0], 1e-9).unwrap();
        assert!(s.reversible && s.similarity_symmetric);

        // C_12 n_2 = 0.3·300 = 90 against C_21 n_1 = 0.1·100 = 10
        let c = ConfusionMatrix::from_rows(&[vec![0.9, 0.3], vec![0.1, 0.7]]).unwrap();
        let r = check_detailed_balance(&c, &[100.0, 300.0], 1e-9).unwrap();
        assert!(!r.reversible && !r.similarity_symmetric);
        assert!((r.max_violation - 80.0).abs() < 1e-9);

        // 0.3·100 = 0.1·300 balances
        let c = ConfusionMatrix::from_rows(&[vec![0.7, 0.1], vec![0.3, 0.9]]).unwrap();
        let r = check_detailed_balance(&c, &[100.0, 300.0], 1e-9).unwrap();
        assert!(r.reversible && r.similarity_symmetric);
    }

    #[test]
    fn group_effects_center_to_zero() {
        let g = GroupEffects::new(&[3.0, 5.0, 2.0], &[1.0, -2.0, 4.0]).unwrap();
        assert!((g.weighted_mean - (3.0 - 10.0 + 8.0) / 10.0).abs() < 1e-15);
        assert!(g.centered.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn shrinkage_worked_example() {
        let r = shrinkage_report(&sym(), &[100.0, 100.0], &[1.0, 3.0]).unwrap();
        assert!((r.ss_true - 200.0).abs() < 1e-9);
        assert!((r.ss_proxy - 128.0).abs() < 1e-9);
        assert!(r.neutral && r.reversible && r.shrinks());
        let ev = r.eigenvalues.unwrap();
        assert!((ev[0] - 1.0).abs() < 1e-9 && (ev[1] - 0.8).abs() < 1e-9);
        assert_eq!(r.spectrum_ok, Some(true));
    }

    #[test]
    fn identity_preserves_spread() {
        let r = shrinkage_report(&ConfusionMatrix::identity(3), &[4.0, 9.0, 2.0], &[0.5, 1.0, -3.0]).unwrap();
        assert!((r.ss_true - r.ss_proxy).abs() < 1e-12);
        // Σ n_j (β_j − β̄)² computed directly
        let n = [4.0, 9.0, 2.0];
        let b = [0.5, 1.0, -3.0];
        let mean = (2.0 + 9.0 - 6.0) / 15.0;
        let direct: f64 = (0..3).map(|j| n[j] * (b[j] - mean) * (b[j] - mean)).sum();
        assert!((r.ss_true - direct).abs() < 1e-12);
    }

    #[test]
    fn non_reversible_omits_spectrum() {
        let c = ConfusionMatrix::from_rows(&[vec![0.9, 0.3], vec![0.1, 0.7]]).unwrap();
        let r = shrinkage_report(&c, &[100.0, 300.0], &[1.0, 2.0]).unwrap();
        assert!(!r.reversible);
        assert!(r.eigenvalues.is_none());
        assert!(shrinkage_report(&c, &[0.0, 300.0], &[1.0, 2.0]).is_err());
    }
}
