//! Stability bounds, Lipschitz tracking and numerical checks of the
//! inequalities relating the training objectives.

pub mod spectral;

pub use spectral::{
    lipschitz_estimate, power_iteration, safe_beta, safe_beta_from_norms, spectral_estimate, spectral_norm,
    SpectralEstimate, SpectralTracker,
};

pub mod propositions;

pub use propositions::{check_propositions, write_reports_csv, PropReport, Suite, SuiteConfig};
