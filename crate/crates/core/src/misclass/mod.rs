//! Confusion-matrix theory of misclassification bias.

mod classical;
mod decompose;
mod expectation;
mod flows;
mod jacobi;
mod montecarlo;
mod structure;

pub use classical::{classical_attenuation_baseline, simulate_classical_attenuation, SlopeEstimate};
pub use decompose::{decompose_proxy_estimator, mixture_coefficients, Decomposition, Mixture};
pub use expectation::{
    expected_bias, expected_counts, expected_signal_mass, roe_expected_beta, signal_mass, ExpectedBias,
    IDENTITY_TOL, NEUTRAL_FORM_TOL,
};
pub use flows::{
    confusion_from_flows, flows_from_labels, precision_per_predicted_class, ConfusionMatrix, FlowCounts,
    STOCHASTIC_TOL,
};
pub use jacobi::{jacobi_eigen, SymmetricEigen, OFF_DIAGONAL_TOL};
pub use montecarlo::{mc_misclassification_oracle, sample_flows, Moments, MonteCarloSummary};
pub use structure::{
    check_detailed_balance, check_neutrality, shrinkage_report, similarity_matrix, weighted_norm_sq,
    DetailedBalance, GroupEffects, Neutrality, ShrinkageReport, STRUCTURE_TOL,
};
