use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Cholesky pivot at the given (0-based) index fell below the threshold.
    #[error("matrix is not positive definite (pivot {0})")]
    NotPositiveDefinite(usize),

    #[error("triangular matrix is singular (diagonal index {0})")]
    SingularTriangular(usize),

    #[error("leading block of the matrix is singular")]
    SingularLeadingBlock,

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("matrix is not symmetric positive semi-definite: {0}")]
    NotPsd(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    /// A numerical failure inside the ELBO, tagged with where it happened.
    #[error("numerical failure in layer {layer}, term `{term}`: {source}")]
    Numerical {
        layer: usize,
        term: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),

    #[error("parse error at row {row}, column {col}")]
    Parse { row: usize, col: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn at(self, layer: usize, term: &'static str) -> Self {
        match self {
            e @ Error::Numerical { .. } => e,
            e => Error::Numerical {
                layer,
                term,
                source: Box::new(e),
            },
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
