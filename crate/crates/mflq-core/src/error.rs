use thiserror::Error;

/// Failure modes of the toolkit. Input problems (bad files, wrong shapes)
/// are kept distinct from numeric failures (divergence, lost definiteness,
/// convergence caps) so the CLI can map them to different exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {name}: expected {expected_rows}x{expected_cols}, got {rows}x{cols}")]
    DimensionMismatch {
        name: String,
        expected_rows: usize,
        expected_cols: usize,
        rows: usize,
        cols: usize,
    },

    #[error("{name} must be symmetric: asymmetry {asymmetry:.3e} exceeds tolerance {tol:.3e}")]
    NonSymmetric { name: String, asymmetry: f64, tol: f64 },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("assumption violated ({which}): {detail}")]
    AssumptionViolation { which: String, detail: String },

    #[error("integration diverged at step {step}: {context}")]
    Divergence { step: usize, context: String },

    #[error("loss of definiteness in {context}: {detail}")]
    LossOfDefiniteness { context: String, detail: String },

    #[error("{context} is not positive semidefinite: min eigenvalue {min_eig:.3e}")]
    NotPsd { context: String, min_eig: f64 },

    #[error("insufficient data for {context}: need {needed}, got {got}")]
    InsufficientData { context: String, needed: usize, got: usize },

    #[error("system is not mean-square stable: spectral radius {rho:.9}")]
    NotStable { rho: f64 },

    #[error("no stabilizing gain found: {0}")]
    NotStabilizable(String),

    #[error("{what} did not converge within {limit} iterations (last change {last_change:.3e})")]
    NoConvergence { what: String, limit: usize, last_change: f64 },

    #[error("internal consistency check failed: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by malformed user input rather than numerics.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::DimensionMismatch { .. }
                | Error::NonSymmetric { .. }
                | Error::Input(_)
                | Error::Io(_)
                | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
