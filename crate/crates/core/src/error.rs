use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Requested order or size exceeds what the kernel is configured for.
    #[error("capability exceeded: {0}")]
    Capability(String),
    /// Evaluation outside the domain of a function or representation.
    #[error("domain error: {0}")]
    Domain(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("mesh generation failed: {0}")]
    Meshing(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("ill-conditioned system (pivot ratio {pivot_ratio:e}, residual {residual:e})")]
    Conditioning { pivot_ratio: f64, residual: f64 },
    #[error("iteration did not converge after {iterations} steps (last residual {last:e})")]
    Convergence {
        iterations: usize,
        last: f64,
        history: Vec<f64>,
    },
    #[error("invalid arrangement:\n{0}")]
    Separation(String),
    #[error("T-matrix file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
