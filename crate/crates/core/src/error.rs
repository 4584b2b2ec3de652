//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("dimension mismatch on {axis}: expected {expected}, got {got}")]
    DimensionMismatch {
        axis: String,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("empty data passed to {context}")]
    EmptyData { context: String },

    #[error("optimisation diverged in {context} at epoch {epoch}, step {step}")]
    Divergence {
        context: String,
        epoch: usize,
        step: usize,
    },

    #[error("{method} did not converge: residual {residual:.3e} > tol {tol:.3e} after {iterations} iterations")]
    SolverStalled {
        method: String,
        residual: f64,
        tol: f64,
        iterations: usize,
    },

    #[error("{method} diverged: iterate norm {norm:.3e} exceeded bound; retry with a smaller scale")]
    SolverDiverged { method: String, norm: f64 },

    #[error("zero Fisher diagonal entry at index {index} with zero damping")]
    ZeroFisherEntry { index: usize },

    #[error("invalid configuration: {message}")]
    InvalidConfig { message: String },

    #[error("nothing to repair: the model classifies every test example correctly")]
    NothingToRepair,

    #[error("quadrature grid too small: boundary posterior mass {boundary_mass:.3e} exceeds 1e-8")]
    InsufficientCoverage { boundary_mass: f64 },

    #[error("additivity violated: group score differs from per-example sum by {delta:.3e}")]
    AdditivityViolation { delta: f64 },

    #[error("bad magic number in {path}: expected {expected:#010x}, got {got:#010x}")]
    BadMagic {
        path: String,
        expected: u32,
        got: u32,
    },

    #[error("truncated payload in {path}: header promises {expected} records, payload holds {got}")]
    Truncated {
        path: String,
        expected: usize,
        got: usize,
    },

    #[error("record count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("fingerprint mismatch: config expects {expected}, artifact carries {got}")]
    FingerprintMismatch { expected: String, got: String },

    #[error("container format error: {message}")]
    Container { message: String },

    #[error("operation unsupported by this model: {message}")]
    Unsupported { message: String },

    #[error("pipeline stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<CoreError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    pub fn invalid_config(message: impl Into<String>) -> Self {
        CoreError::InvalidConfig {
            message: message.into(),
        }
    }

    pub fn in_stage(self, stage: &str) -> Self {
        CoreError::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}
