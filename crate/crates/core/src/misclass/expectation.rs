//! Expected counts, signal mass and the ratio-of-expectations estimator.

use crate::error::{Error, Result};

use super::flows::ConfusionMatrix;
use super::structure::check_neutrality;

/// Tolerance at which the neutral-form bias is cross-checked.
pub const NEUTRAL_FORM_TOL: f64 = 1e-12;
/// Agreement required between the general and neutral bias forms.
pub const IDENTITY_TOL: f64 = 1e-9;

fn check_len(c: &ConfusionMatrix, v: &[f64]) -> Result<()> {
    if v.len() != c.dim() {
        Err(Error::DimensionMismatch { expected: c.dim(), found: v.len() })
    } else {
        Ok(())
    }
}

/// `E[ñ | n] = C n`.
pub fn expected_counts(c: &ConfusionMatrix, n: &[f64]) -> Result<Vec<f64>> {
    c.mul_vec(n)
}

pub fn signal_mass(n: &[f64], beta: &[f64]) -> Vec<f64> {
    n.iter().zip(beta).map(|(a, b)| a * b).collect()
}

/// `E[ñ·β̃ | n] = C (n·β)`.
pub fn expected_signal_mass(c: &ConfusionMatrix, n: &[f64], beta: &[f64]) -> Result<Vec<f64>> {
    check_len(c, n)?;
    check_len(c, beta)?;
    c.mul_vec(&signal_mass(n, beta))
}

/// First-order approximation `E β̃ ≈ diag(Cn)⁻¹ C (n·β)`.
pub fn roe_expected_beta(c: &ConfusionMatrix, n: &[f64], beta: &[f64]) -> Result<Vec<f64>> {
    let counts = expected_counts(c, n)?;
    let mass = expected_signal_mass(c, n, beta)?;
    counts
        .iter()
        .zip(&mass)
        .enumerate()
        .map(|(j, (cn, m))| if *cn > 0.0 { Ok(m / cn) } else { Err(Error::EmptyExpectedClass(j)) })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedBias {
    /// `β − E β̃` in the general form.
    pub bias: Vec<f64>,
    /// `diag(Cn)⁻¹ (I − C)(n·β)`, present only when `Cn = n` within 1e-12.
    pub neutral_form: Option<Vec<f64>>,
    /// Largest gap between the two forms when both exist.
    pub form_discrepancy: Option<f64>,
}

impl ExpectedBias {
    pub fn forms_agree(&self) -> Option<bool> {
        self.form_discrepancy.map(|d| d <= IDENTITY_TOL)
    }
}

pub fn expected_bias(c: &ConfusionMatrix, n: &[f64], beta: &[f64]) -> Result<ExpectedBias> {
    let roe = roe_expected_beta(c, n, beta)?;
    let bias: Vec<f64> = beta.iter().zip(&roe).map(|(b, e)| b - e).collect();

    let neutrality = check_neutrality(c, n, NEUTRAL_FORM_TOL)?;
    if !neutrality.neutral {
        return Ok(ExpectedBias { bias, neutral_form: None, form_discrepancy: None });
    }
    let counts = expected_counts(c, n)?;
    let mass = signal_mass(n, beta);
    let c_mass = c.mul_vec(&mass)?;
    let neutral: Vec<f64> = (0..c.dim()).map(|j| (mass[j] - c_mass[j]) / counts[j]).collect();
    let gap = neutral.iter().zip(&bias).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(ExpectedBias { bias, neutral_form: Some(neutral), form_discrepancy: Some(gap) })
}
