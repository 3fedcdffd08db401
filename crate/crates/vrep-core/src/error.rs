use thiserror::Error;

/// Crate-wide error type. Variants carry enough context to map cleanly onto
/// the CLI exit codes (config = 2, numerical = 3, io = 4).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dense assembly refused: problem size {size} exceeds cap {cap}")]
    DenseTooLarge { size: usize, cap: usize },

    #[error("solver failed: {0}")]
    SolverFailure(String),

    #[error("phase assignment did not converge: residual {residual:.3e} after {iterations} iterations")]
    PhaseAssignment { residual: f64, iterations: usize },

    #[error("eigensolver did not converge: residual {residual:.3e} after {iterations} restarts")]
    Eigensolver { residual: f64, iterations: usize },

    #[error(
        "numerical failure at t = {time:.6} (step {step}): {reason}; max density error {density_error:.3e}"
    )]
    Propagation {
        time: f64,
        step: usize,
        reason: String,
        density_error: f64,
    },

    #[error("file format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid_input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
