use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed CSV: {0}")]
    Csv(#[from] csv::Error),

    #[error("missing column: {0}")]
    MissingColumn(String),

    #[error("duplicate column label: {0}")]
    DuplicateColumn(String),

    #[error("non-numeric value {value:?} in column {column} (data row {row})")]
    ParseCell { row: usize, column: String, value: String },

    #[error("unknown treatment label {label:?} (expected {trt:?} or {ctrl:?})")]
    UnknownTreatment { label: String, trt: String, ctrl: String },

    #[error("empty arm: no rows carry label {0:?}")]
    EmptyArm(String),

    #[error("arm exhausted: {0}")]
    ArmExhausted(u8),

    #[error("empty input")]
    EmptyInput,

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch { context: &'static str, expected: usize, found: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite input in {0}")]
    NonFinite(&'static str),

    #[error("zero variance: {0}")]
    ZeroVariance(&'static str),

    #[error("group too small: {0}")]
    GroupTooSmall(&'static str),

    #[error("dataset has unobserved cells; impute first")]
    Incomplete,

    #[error("{0}")]
    UnsupportedMissingness(String),

    #[error("every cross-validation fold was degenerate")]
    AllFoldsDegenerate,
}
