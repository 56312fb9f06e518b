use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("invalid catalog: {}", .0.join("; "))]
    Catalog(Vec<String>),

    #[error("record for episode `{0}` has no metadata header")]
    MissingMetadata(String),

    #[error("episode `{episode}`: {modality:?} stop at t={time} without a prior start")]
    UnmatchedStop {
        episode: String,
        modality: crate::catalog::Modality,
        time: f64,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("no supervised steps: every label is NaN")]
    NoLabels,

    #[error("degenerate outcome: {0}")]
    SingleClass(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error(
        "normalization statistics mismatch: model expects {expected}, data built with {found}"
    )]
    StatsMismatch { expected: String, found: String },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
