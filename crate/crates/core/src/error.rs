use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("index ({row}, {col}) out of range for a {n_rows}x{n_cols} matrix")]
    InvalidIndex {
        row: usize,
        col: usize,
        n_rows: usize,
        n_cols: usize,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite input to {0}")]
    NonFinite(&'static str),

    #[error("regularizer `{0}` does not support a separable diagonally-weighted prox")]
    UnsupportedRegularizer(String),

    #[error("coordinate {index} has non-positive curvature {value}")]
    NonconvexCoordinate { index: usize, value: f64 },

    /// The prox subproblem is unbounded below at this step length.
    #[error("prox of `{name}` is unbounded below for step length {nu}")]
    ProxUnbounded { name: String, nu: f64 },

    #[error("invalid quasi-Newton update: {0}")]
    InvalidUpdate(String),

    #[error("numerical inconsistency: {0}")]
    NumericalInconsistency(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("data error: {0}")]
    Data(String),
}
