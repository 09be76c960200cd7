use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node}: {detail}")]
    ShapeMismatch { node: String, detail: String },

    #[error("non-finite value produced by node {node}")]
    NonFinite { node: String },

    #[error("unbound leaf `{0}`")]
    Unbound(String),

    #[error("output `{0}` is not a scalar")]
    NotScalar(String),

    #[error("unknown output `{0}`")]
    UnknownOutput(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("data validation failed: {0}")]
    Validation(String),

    #[error("unknown subject {0}")]
    UnknownSubject(usize),

    #[error("unknown method `{0}` (valid: {1})")]
    UnknownMethod(String, String),

    #[error("variant `{0}` has no subject tokens")]
    VariantLacksTokens(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("bad MSED header in {path}: {detail}")]
    BadMagic { path: PathBuf, detail: String },

    #[error("{path}: expected shape {expected:?}, found {found:?}")]
    DimMismatch {
        path: PathBuf,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("missing checkpoint at {0}")]
    MissingCheckpoint(PathBuf),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(node: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            node: node.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) | Error::UnknownMethod(..) => 2,
            Error::NonFinite { .. } | Error::Diverged { .. } => 4,
            _ => 3,
        }
    }
}
