use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid geometry: {0}")]
    Geometry(String),

    #[error("non-finite value at index {index} in {what}")]
    NonFinite { what: &'static str, index: usize },

    #[error("invalid normalization bounds [{min}, {max}] for {quantity}")]
    DegenerateBounds { quantity: &'static str, min: f64, max: f64 },

    #[error("density {value} at index {index} is not positive and no floor is configured")]
    NonPositiveDensity { index: usize, value: f64 },

    #[error("CFL condition violated: max |vx| = {max_vx}, max |vy| = {max_vy}, Courant sum = {courant}")]
    Cfl { max_vx: f64, max_vy: f64, courant: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("matrix is not positive definite ({0})")]
    NotPositiveDefinite(String),

    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("corrupt or incompatible file: {0}")]
    Format(String),

    #[error("content hash mismatch: expected {expected}, found {found}")]
    HashMismatch { expected: String, found: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
