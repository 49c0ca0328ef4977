use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing value at row {row}, column '{column}'")]
    MissingValue { row: usize, column: String },

    #[error("non-numeric value '{value}' at row {row}, column '{column}'")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("exposure not binary: value '{value}' at row {row}")]
    ExposureNotBinary { row: usize, value: String },

    #[error("need at least 2 records per exposure arm (exposed: {exposed}, unexposed: {unexposed})")]
    TooFewPerArm { exposed: usize, unexposed: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("design contract mismatch: {0}")]
    ContractMismatch(String),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("failed to converge: {0}")]
    Convergence(String),

    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// True for errors caused by the caller's inputs (files, schema, configuration)
    /// rather than by a numerical failure during estimation.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::MissingValue { .. }
            | Error::NonNumeric { .. }
            | Error::ExposureNotBinary { .. }
            | Error::TooFewPerArm { .. }
            | Error::InvalidInput(_)
            | Error::ContractMismatch(_)
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Json(_) => true,
            Error::Fold { source, .. } => source.is_validation(),
            Error::Degenerate(_) | Error::Convergence(_) => false,
        }
    }
}
