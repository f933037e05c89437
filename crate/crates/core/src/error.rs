use std::path::PathBuf;

/// Errors produced by the guided-decoding engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unsupported op in gradient path: {0}")]
    UnsupportedOp(String),

    #[error("degenerate support: {0}")]
    DegenerateSupport(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("unknown style target `{0}`")]
    UnknownStyle(String),

    #[error("malformed weight file: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
