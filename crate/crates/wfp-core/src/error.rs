use thiserror::Error;

/// Every fallible operation in the crate reports one of these.
#[derive(Debug, Error)]
pub enum WfpError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid field: {0}")]
    InvalidField(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("overflow: {0}")]
    Overflow(String),

    #[error("aliasing detected: imaginary residue {residue:.3e} exceeds {threshold:.1e}")]
    Aliasing { residue: f64, threshold: f64 },

    #[error("did not converge: {0}")]
    NoConvergence(String),

    #[error("divergence: {0}")]
    Divergence(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("format error: {0}")]
    Format(String),

    /// `line` is 0 for values given on the command line.
    #[error("config error{}: {message}", config_location(*.line))]
    Config { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn config_location(line: usize) -> String {
    if line == 0 {
        " (command line)".into()
    } else {
        format!(" at line {line}")
    }
}

pub type Result<T> = std::result::Result<T, WfpError>;
