use thiserror::Error;

/// Errors surfaced by the ROSA library.
///
/// The variants follow the failure classes the CLI maps onto exit codes:
/// configuration problems exit with 2, everything else with 1.
#[derive(Debug, Error)]
pub enum RosaError {
    /// Shapes, widths or hyper-parameters that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),

    /// Well-formed configuration but invalid data (non-finite values, out-of-range symbols).
    #[error("input error: {0}")]
    Input(String),

    /// An API called in a state or mode where it does not apply.
    #[error("usage error: {0}")]
    Usage(String),

    /// An internal invariant was violated; indicates a bug.
    #[error("invariant violated: {0}")]
    Invariant(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl RosaError {
    pub fn is_config(&self) -> bool {
        matches!(self, RosaError::Config(_))
    }
}

pub type Result<T> = std::result::Result<T, RosaError>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(RosaError::Config(msg.into()))
}

pub(crate) fn input<T>(msg: impl Into<String>) -> Result<T> {
    Err(RosaError::Input(msg.into()))
}
