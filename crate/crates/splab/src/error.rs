//! Crate-wide error type.

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A config file or CLI argument is malformed or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A tensor or batch has a shape the operation cannot accept.
    #[error("shape error: {0}")]
    Shape(String),

    /// A binary or text artifact failed validation; names the offending field.
    #[error("format error in `{field}`: {message}")]
    Format { field: String, message: String },

    /// Training produced a non-finite loss or parameter.
    #[error("training diverged at epoch {epoch}: {message}")]
    Diverged { epoch: usize, message: String },

    /// An input is degenerate for the requested statistic (e.g. zero variance).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// An iterative solver failed to make acceptable progress.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// The architecture/input combination is not supported.
    #[error("unsupported architecture: {0}")]
    Unsupported(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Shorthand for [`Error::Format`].
    pub fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format { field: field.into(), message: message.into() }
    }

    /// Process exit code for the CLI: usage/config problems exit 1,
    /// runtime failures exit 2.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Format { .. } | Error::Unsupported(_) => 1,
            _ => 2,
        }
    }
}
