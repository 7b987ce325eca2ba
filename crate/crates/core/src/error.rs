use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the numerical kernels.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index {index} out of range 0..{len}")]
    OutOfRange { index: usize, len: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn mismatch(context: &'static str, expected: &[usize], actual: &[usize]) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    /// Wraps an error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
