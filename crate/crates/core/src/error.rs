use thiserror::Error;

/// Errors raised by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// A configuration or parameter value violates an invariant.
    #[error("invalid parameter: {0}")]
    Invalid(String),
    /// Non-finite or otherwise unusable numeric input.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// A simulated state became non-finite.
    #[error("simulation diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    /// Requested times do not fall on the path's grid.
    #[error("grid alignment error: {0}")]
    Alignment(String),
    /// A shift or index falls outside the generated horizon.
    #[error("range error: {0}")]
    Range(String),
    /// The kernel or schedule is degenerate at the requested time.
    #[error("singular: {0}")]
    Singular(String),
    /// Score training produced a non-finite loss.
    #[error("training diverged at step {step} (loss {loss})")]
    Training { step: usize, loss: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Numeric(_) | Error::Divergence { .. } | Error::Singular(_) | Error::Training { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} contains non-finite values")))
    }
}
