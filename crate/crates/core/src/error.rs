use thiserror::Error;

/// Errors raised by the solvers and loaders in this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to parse scenario: {0}")]
    Parse(String),

    #[error("invalid {field}: {message}")]
    Invariant { field: String, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("contraction margin violated: |p|*L3 = {product:.6e} > 1 - beta0 = {bound:.6e}")]
    ContractionMarginViolated { product: f64, bound: f64 },

    #[error("fixed-point iteration did not converge in {iterations} iterations (last step {last_step:.3e})")]
    NoConvergence { iterations: usize, last_step: f64 },

    #[error("singular denominator 1 - p*sigma_z = {value:.3e}")]
    SingularDenominator { value: f64 },

    #[error("control derivative of {0} is not available")]
    MissingControlDerivative(&'static str),

    #[error("non-finite output from {oracle} at (t={t}, x={x}, y={y}, z={z}, u={u})")]
    NonFinite {
        oracle: String,
        t: f64,
        x: f64,
        y: f64,
        z: f64,
        u: f64,
    },

    #[error("explicit step dt = {dt:.4e} exceeds stability bound; required dt <= {required:.4e}")]
    CflViolation { dt: f64, required: f64 },

    #[error("algebra margin violated at t={t}, x={x}: |W_x|*L3 = {product:.4e} > {bound:.4e}")]
    AlgebraMarginViolation {
        t: f64,
        x: f64,
        product: f64,
        bound: f64,
    },

    #[error("{fraction:.4} of paths left the state box (cap {cap:.4})")]
    PathExit { fraction: f64, cap: f64 },

    #[error("Picard iteration diverged after {sweeps} sweeps (change {change:.3e})")]
    PicardDivergence { sweeps: usize, change: f64 },

    #[error("regression basis degenerate at step {step} (condition number {condition:.3e})")]
    RegressionRankDeficiency { step: usize, condition: f64 },

    #[error("per-step fixed point diverged at step {step}")]
    StepDivergence { step: usize },

    #[error("{0}")]
    Precondition(String),
}

impl Error {
    pub(crate) fn invariant(field: &str, message: impl Into<String>) -> Self {
        Error::Invariant {
            field: field.to_string(),
            message: message.into(),
        }
    }

    /// True for errors that come from numerical failure rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NoConvergence { .. }
                | Error::SingularDenominator { .. }
                | Error::CflViolation { .. }
                | Error::AlgebraMarginViolation { .. }
                | Error::PathExit { .. }
                | Error::PicardDivergence { .. }
                | Error::RegressionRankDeficiency { .. }
                | Error::StepDivergence { .. }
                | Error::ContractionMarginViolated { .. }
                | Error::NonFinite { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
