//! Crate-wide error type and result alias.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violates a precondition (shape, range, class index...).
    #[error("invalid input: {0}")]
    Input(String),

    /// A computation hit a numeric guard (zero norm, vanishing coefficient...).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Training produced a non-finite loss or otherwise diverged.
    #[error("training failed: {0}")]
    Training(String),

    /// Configuration file rejected; carries every violation found, not just the first.
    #[error("invalid configuration:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    /// A pipeline stage was invoked before the stage it depends on.
    #[error("missing dependency: run stage `{0}` first")]
    Dependency(String),

    /// Checkpoint container failed validation (bad magic, checksum, stage tag or config hash).
    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 validation, 2 dependency, 3 training, 4 i/o.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Input(_) | Error::Config(_) | Error::Numeric(_) => 1,
            Error::Dependency(_) => 2,
            Error::Training(_) => 3,
            Error::Io { .. } | Error::Checkpoint(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
