use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("row {row}: {message}")]
    InvalidRow { row: usize, message: String },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("degenerate propensity: {0}")]
    DegeneratePropensity(String),

    #[error("sampler failure: {0}")]
    Sampler(String),

    #[error("root finding failed: {0}")]
    RootFinding(String),

    #[error("{failed} of {attempted} replicates failed: {message}")]
    TooManyFailures {
        failed: usize,
        attempted: usize,
        message: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
