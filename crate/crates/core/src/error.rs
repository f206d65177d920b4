use thiserror::Error;

/// Errors raised by the toolkit.
///
/// Variants map onto the three failure classes used by the command line:
/// bad input/configuration, numerical breakdown, and solver failure.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("singular mass matrix (condition estimate {condition:.3e})")]
    SingularMassMatrix { condition: f64 },

    #[error("solver failed after {iterations} iterations: max violation {violation:.3e}, stationarity {stationarity:.3e}")]
    SolverFailure {
        iterations: usize,
        violation: f64,
        stationarity: f64,
        /// Best iterate found (flattened decision vector).
        best: Vec<f64>,
    },

    #[error("funnel estimation failed: {0}")]
    Estimation(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerical machinery (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Numerical(_)
                | Error::SingularMassMatrix { .. }
                | Error::SolverFailure { .. }
                | Error::Estimation(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::Dimension {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}
