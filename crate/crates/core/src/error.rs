use thiserror::Error;

/// Errors raised by the solvers, the simulator and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("field functions live on different grids")]
    GridMismatch,

    #[error("truncation defect too large for {what}: {mass:e} (limit {limit:e})")]
    Truncation {
        what: &'static str,
        mass: f64,
        limit: f64,
    },

    #[error("{solver} did not converge after {iterations} iterations (last change {last_change:e})")]
    NotConverged {
        solver: &'static str,
        iterations: usize,
        last_change: f64,
    },

    #[error("{what} left its admissible range: value {value} at node {node}")]
    OutOfRange {
        what: &'static str,
        value: f64,
        node: usize,
    },

    #[error("could not bracket the critical height after {doublings} doublings")]
    BracketFailure { doublings: u32 },

    #[error("corrupted eigenfunction: {0}")]
    CorruptEigenfunction(String),

    #[error("{what} exceeded the cap of {cap}")]
    CapExceeded { what: &'static str, cap: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    /// Short machine-readable tag, used by the CLI error document.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidParameter { .. } => "invalid_parameter",
            Error::GridMismatch => "grid_mismatch",
            Error::Truncation { .. } => "truncation",
            Error::NotConverged { .. } => "not_converged",
            Error::OutOfRange { .. } => "out_of_range",
            Error::BracketFailure { .. } => "bracket_failure",
            Error::CorruptEigenfunction(_) => "corrupt_eigenfunction",
            Error::CapExceeded { .. } => "cap_exceeded",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
