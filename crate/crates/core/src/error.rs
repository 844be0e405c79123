use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown injection point `{0}`")]
    UnknownTarget(String),

    #[error("duplicate injection point `{0}`")]
    DuplicateTarget(String),

    #[error("stale cache: {0}")]
    StaleCache(String),

    #[error("codec is not frozen")]
    CodecNotFrozen,

    #[error("payload too short: no threshold over {n} bits reaches false positive rate {fpr}")]
    PayloadTooShort { n: usize, fpr: f64 },

    #[error("codec pretraining did not converge: clean validation accuracy {accuracy:.4} < {required}")]
    NonConvergence { accuracy: f64, required: f64 },

    #[error("training diverged at step {step}: non-finite loss")]
    Divergence { step: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("image: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(format!($($arg)*))
    };
}

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::Error::InvalidArgument(format!($($arg)*))
    };
}

pub(crate) use invalid;
pub(crate) use shape_err;
