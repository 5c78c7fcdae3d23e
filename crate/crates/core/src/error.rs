use thiserror::Error;

/// Errors raised by the scene model and splatting pipeline.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("empty initialization")]
    EmptyInitialization,

    #[error("non-finite parameter on gaussian {index}: {what}")]
    NonFiniteParameter { index: usize, what: &'static str },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("image dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),

    #[error("camera rotation is not orthonormal (max deviation {deviation:.3e})")]
    NonOrthonormalRotation { deviation: f64 },

    #[error("invalid camera: {0}")]
    InvalidCamera(String),
}
