use thiserror::Error;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum LaxError {
    #[error("integration failed at s = {time}: non-finite state {state:?}")]
    IntegrationFailure { time: f64, state: Vec<f64> },
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("cannot build program: {0}")]
    Construction(String),
    #[error("decomposition failed at step {step}: residual {residual:.3e}")]
    Decomposition { step: usize, residual: f64 },
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("value {value} outside range [{lo}, {hi}]")]
    Range { value: f64, lo: f64, hi: f64 },
    #[error("invalid input: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, LaxError>;
