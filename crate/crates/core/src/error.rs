//! Error type shared by all modules.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes do not line up for an operation.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An argument is outside its valid range.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// NaN or infinity detected at an op boundary (checked mode).
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Input too short or empty for the requested transform.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Inconsistent model or experiment configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Bad dataset contents (labels out of range, events out of bounds, ...).
    #[error("data error: {0}")]
    Data(String),

    /// CSV cell that cannot be parsed; rows and columns are 1-based.
    #[error("parse error at row {row}, col {col}: {msg}")]
    Parse { row: usize, col: usize, msg: String },

    /// Training produced a non-finite loss.
    #[error("divergence at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },

    /// Event placement failed after bounded retries.
    #[error("generation error: {0}")]
    Generation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
}
