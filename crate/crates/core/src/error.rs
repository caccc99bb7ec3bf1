use thiserror::Error;

/// Errors produced anywhere in the discretization, assembly and solve pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("parameter {value} outside the knot domain [{lo}, {hi}]")]
    Domain { value: f64, lo: f64, hi: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("element {element} is inverted (det = {det:e})")]
    ElementInversion { element: usize, det: f64 },

    #[error("configuration error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("singular matrix: zero pivot at dof {dof}")]
    SingularMatrix { dof: usize },

    #[error("seed length mismatch: expected {expected}, found {found}")]
    SeedMismatch { expected: usize, found: usize },

    #[error("Newton iteration did not converge in load step {step} after {iterations} iterations (last residual {last_residual:e})")]
    NonConvergence {
        step: usize,
        iterations: usize,
        last_residual: f64,
        history: Vec<f64>,
    },

    #[error("I/O failure on {path}: {message}")]
    Io { path: String, message: String },
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidInput(message.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
