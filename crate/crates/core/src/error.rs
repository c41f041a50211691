//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot normalize a vector with zero norm")]
    Normalization,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value encountered: {0}")]
    Numeric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("schema violation: {0}")]
    Schema(String),

    #[error("class {0} is not present in the memory bank")]
    ClassUnavailable(usize),

    #[error("need at least two classes, found {0}")]
    InsufficientClasses(usize),

    #[error("prototype sets are not class-aligned: {0}")]
    Alignment(String),

    #[error("target is not a probability distribution: {0}")]
    Target(String),

    #[error("cannot evaluate on an empty test set")]
    Eval,

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("reports are not comparable: {0}")]
    Compare(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("report format error: {0}")]
    Report(String),
}
