//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A shape or extent did not match what an operation requires.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// An argument violated an operation's preconditions.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The Grammian of the weighted least-squares system is numerically
    /// singular: not enough confident samples for the basis dimension.
    #[error("singular Grammian: {0}")]
    SingularGrammian(String),

    /// The basis itself is rank-deficient (its full-confidence Grammian is
    /// not positive definite).
    #[error("degenerate basis: {0}")]
    DegenerateBasis(String),

    /// A statistic required non-constant input but got a constant series.
    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),

    /// The training loss became non-finite; carries the first offending
    /// output pixel for diagnostics.
    #[error("non-finite loss at epoch {epoch}, iteration {iteration}, pixel {pixel} (value {value})")]
    NonFiniteLoss {
        epoch: usize,
        iteration: usize,
        pixel: usize,
        value: f64,
    },

    /// A file did not conform to the expected on-disk format.
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    /// A value cannot be represented in the requested container.
    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
