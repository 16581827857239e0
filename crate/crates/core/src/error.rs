use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("empty sequence passed to recurrent layer")]
    EmptySequence,

    #[error("unknown category `{0}`")]
    UnknownCategory(String),

    #[error("category index {index} out of range for vocabulary of {len}")]
    CategoryIndex { index: usize, len: usize },

    #[error("invalid layout: {0}")]
    InvalidLayout(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid request: {field}: {message}")]
    Request { field: String, message: String },

    #[error("no paired predictors; sample from raw mixture coefficients instead")]
    NoPairedPredictors,

    #[error("{0}")]
    Empty(&'static str),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("corpus {path}: {malformed} of {total} lines malformed")]
    CorpusMalformed {
        path: String,
        malformed: usize,
        total: usize,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn request(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Request {
            field: field.into(),
            message: message.into(),
        }
    }
}
