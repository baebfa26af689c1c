use thiserror::Error;

/// Errors raised by the detection pipeline and its primitives.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: {dim} expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        dim: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("duplicate voxel coordinate {0:?}")]
    DuplicateCoordinate([usize; 3]),
    #[error("coordinate {coord:?} outside grid {dims:?}")]
    OutOfGrid { coord: [usize; 3], dims: [usize; 3] },
    #[error("malformed bin: {0}")]
    MalformedBin(String),
    #[error("unstable key assignment: {0}")]
    UnstableAssignment(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("{stage}: {source}")]
    Stage { stage: &'static str, source: Box<Error> },
}

impl Error {
    pub(crate) fn shape(context: &'static str, dim: &'static str, expected: usize, actual: usize) -> Self {
        Error::ShapeMismatch {
            context,
            dim,
            expected,
            actual,
        }
    }

    /// Tags an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
