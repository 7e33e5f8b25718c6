use thiserror::Error;

/// Errors raised by the model, solvers and file loaders.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {}", .0.join("; "))]
    InvalidParams(Vec<String>),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite input to {0}")]
    NonFinite(&'static str),

    #[error("size cap exceeded: {what} needs {needed}, cap is {cap}")]
    CapExceeded {
        what: &'static str,
        needed: usize,
        cap: usize,
    },

    #[error("matrix exponential overflowed")]
    ExpmOverflow,

    #[error("singular matrix in {0}")]
    Singular(&'static str),

    #[error("covariance is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("time {0} is not on the recorded grid")]
    TimeNotRecorded(f64),

    #[error("{0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerics (as opposed to bad input).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::ExpmOverflow | Error::Singular(_) | Error::NotPositiveDefinite(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
