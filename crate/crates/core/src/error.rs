use thiserror::Error;

/// Errors raised by the distribution engine, the fitters and the data layer.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum CmpError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("series mode λ^(1/ν) = {mode:.3e} exceeds the expected-count cap {cap:.3e}")]
    Overflow { mode: f64, cap: f64 },

    #[error("asymptotic expansion requested outside its validity region (λ = {lambda}, ν = {nu})")]
    Domain { lambda: f64, nu: f64 },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("degenerate variance at observation {index}: {value:.3e}")]
    DegenerateVariance { index: usize, value: f64 },

    #[error("design matrix is rank deficient (rank {rank} < {cols} columns)")]
    RankDeficient { rank: usize, cols: usize },

    #[error("information matrix is singular: {0}")]
    SingularInformation(String),

    #[error("smoother needs at least 4 distinct x values with positive weight, found {0}")]
    InsufficientDistinctX(usize),

    #[error("unknown term `{0}`")]
    UnknownTerm(String),

    #[error("invalid model specification: {0}")]
    InvalidSpec(String),

    #[error("formula parse error at token {position}: {message}")]
    Parse { position: usize, message: String },

    #[error("{path}: {message}")]
    Io { path: String, message: String },

    #[error("row {row}, column `{column}`: {message}")]
    Coercion {
        row: usize,
        column: String,
        message: String,
    },

    #[error("data error: {0}")]
    Data(String),
}

pub type Result<T> = std::result::Result<T, CmpError>;
