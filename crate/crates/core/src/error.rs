use std::path::PathBuf;

use thiserror::Error;

use crate::params::ParamKey;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown feature family `{0}`")]
    UnknownFamily(String),

    #[error("feature family `{family}`: id {id} out of range (cardinality {cardinality})")]
    IdOutOfRange {
        family: String,
        id: usize,
        cardinality: usize,
    },

    #[error("feature family `{family}`: expected a {expected} leaf")]
    KindMismatch { family: String, expected: &'static str },

    #[error("unknown user {user} (schema declares {users} users)")]
    UnknownUser { user: usize, users: usize },

    #[error("FM feature index {index} out of range (dimensionality {dim})")]
    FeatureIndex { index: usize, dim: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("schema mismatch in family `{0}`")]
    SchemaMismatch(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: invalid field `{field}`: {message}")]
    InvalidField {
        path: PathBuf,
        line: usize,
        field: &'static str,
        message: String,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(ParamKey),

    #[error("training diverged at epoch {epoch}: validation metric is not finite")]
    Divergence { epoch: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
