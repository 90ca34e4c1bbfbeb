use thiserror::Error;

/// Errors produced across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: String,
        right: String,
    },
    #[error("domain error in {op}: entry {index} has value {value}")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("index {index} out of range for {what} of width {width}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        width: usize,
    },

    #[error("missing blob '{name}' ({path})")]
    MissingBlob { name: String, path: String },
    #[error("checksum failure for blob '{name}': expected {expected:08x}, found {found:08x}")]
    Checksum {
        name: String,
        expected: u32,
        found: u32,
    },
    #[error("shape mismatch for blob '{name}': expected {expected}, found {found}")]
    BlobShape {
        name: String,
        expected: String,
        found: String,
    },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("vocabulary error: {0}")]
    Vocabulary(String),
    #[error("corpus error: {0}")]
    Corpus(String),
    #[error("no valid {t}-token windows to search")]
    EmptySearch { t: usize },

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Training { epoch: usize, loss: f64 },
    #[error("optimization failed: all {restarts} restarts aborted ({reason})")]
    Optimization { restarts: usize, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: impl ToString, right: impl ToString) -> Self {
        Error::Shape {
            op,
            left: left.to_string(),
            right: right.to_string(),
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_)
                | Error::Training { .. }
                | Error::Optimization { .. }
                | Error::Degenerate(_)
                | Error::Domain { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
