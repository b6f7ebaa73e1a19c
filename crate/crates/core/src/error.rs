use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),
    #[error("shape mismatch: expected dimension {expected}, found {found}")]
    Shape { expected: usize, found: usize },
    #[error("function undefined at eigenvalue {0}")]
    Domain(f64),
    #[error("matrix is not PSD: smallest eigenvalue {min_eig:e} below tolerance {tol:e}")]
    NotPsd { min_eig: f64, tol: f64 },
    #[error("value {value} outside the range of the objective (supremum {sup})")]
    Range { value: f64, sup: f64 },
    #[error("quadrature did not converge on [{a}, {b}] after {panels} panels")]
    Quadrature { a: f64, b: f64, panels: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("instance too large for exhaustive search: m = {m} exceeds {max}")]
    Capacity { m: usize, max: usize },
    #[error("audit failed to start: {0}")]
    Audit(String),
    #[error("LP solver failure: {0}")]
    Solver(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
