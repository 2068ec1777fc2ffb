use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid value: {0}")]
    Value(String),

    #[error("invalid quantizer config: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("gradient descent unstable at lr={lr}: {reason}")]
    Instability { lr: f64, reason: String },

    #[error("graph error at site `{site}`: {reason}")]
    Graph { site: String, reason: String },

    #[error("non-finite activation at site `{site}`")]
    Numeric { site: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("validation error in `{field}`: {reason}")]
    Validation { field: String, reason: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
