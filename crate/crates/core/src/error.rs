use thiserror::Error;

/// Error type shared across the pipeline.
///
/// Variants are grouped by how the CLI maps them to exit codes:
/// `Usage` -> 1, data/shape/IO problems -> 2, numerical failures -> 3.
#[derive(Error, Debug)]
pub enum Error {
    #[error("usage error: {0}")]
    Usage(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("bad data: {0}")]
    Data(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("signal too short: {got} samples, need at least {need}")]
    TooShort { got: usize, need: usize },

    #[error("silent signal: {0}")]
    Silent(String),

    #[error("sample-rate mismatch: expected {expected} Hz, got {got} Hz")]
    SampleRate { expected: u32, got: u32 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code the CLI uses for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Numerical(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
