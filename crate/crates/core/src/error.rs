use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("inverse transform produced a non-real signal (max |imag| = {max_imag:.3e})")]
    NonRealReconstruction { max_imag: f64 },

    #[error("training diverged at epoch {epoch}")]
    DivergedTraining { epoch: usize },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}, column {col}: {message}")]
    CsvParse {
        row: usize,
        col: String,
        message: String,
    },

    #[error("timestamps are not strictly increasing at row {row}")]
    Order { row: usize },

    #[error("could not parse a forecast from the response: {reason}")]
    ParseFailure { reason: String, response: String },

    #[error("forecast has {found} values, expected {expected}")]
    LengthMismatch {
        found: usize,
        expected: usize,
        response: String,
    },

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("endpoint configuration error: {0}")]
    EndpointConfig(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}
