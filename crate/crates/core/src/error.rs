use thiserror::Error;

/// Errors produced anywhere in the alignment engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Geometry with no spatial extent (coincident points, zero interocular distance).
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A numeric routine broke down (singular system, NaN during fitting).
    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("unsupported container version {found} (this build reads version {expected})")]
    Version { found: u32, expected: u32 },

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn ensure_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        })
    }
}
