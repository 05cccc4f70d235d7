use thiserror::Error;

/// Errors raised by the solvers, filters and simulator.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum MfgError {
    #[error("dimension mismatch in {field}: expected {expected}, found {found}")]
    DimensionMismatch {
        field: String,
        expected: String,
        found: String,
    },

    #[error("invalid parameter {field}: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("no stabilizing Riccati solution: {0}")]
    NonStabilizable(String),

    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged {
        what: String,
        iterations: usize,
        residual: f64,
    },

    #[error("linear system is numerically singular (condition number {condition:e})")]
    SingularSystem { condition: f64 },

    #[error("covariance lost positive semidefiniteness at t={t}: min eigenvalue {min_eigenvalue:e}")]
    NonPsdDrift { t: f64, min_eigenvalue: f64 },

    #[error("covariance integration unstable at t={t}; reduce the step size")]
    StepTooLarge { t: f64 },

    #[error("time grid mismatch: {0}")]
    GridMismatch(String),

    #[error("filter gain is stale: state at t={state_t}, gain for t={gain_t}")]
    StaleGain { state_t: f64, gain_t: f64 },

    #[error("fixed-point iteration diverged at iteration {iteration} (norm {norm:e})")]
    DivergenceDetected { iteration: usize, norm: f64 },

    #[error("numerical blowup at step {step} for {agent} (norm {norm:e})")]
    NumericalBlowup {
        step: usize,
        agent: String,
        norm: f64,
    },

    #[error("trajectory incomplete: {0}")]
    IncompleteTrajectory(String),
}

pub type Result<T, E = MfgError> = std::result::Result<T, E>;

impl MfgError {
    pub(crate) fn dims(
        field: impl Into<String>,
        expected: impl std::fmt::Display,
        found: impl std::fmt::Display,
    ) -> Self {
        MfgError::DimensionMismatch {
            field: field.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        MfgError::InvalidParameter {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
