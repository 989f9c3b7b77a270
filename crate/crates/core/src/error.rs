use thiserror::Error;

/// Errors raised by the numeric and model layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("aggregation error for tensor '{name}': {lhs:?} vs {rhs:?}")]
    Aggregation {
        name: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("client lacks decoder for modality {0}")]
    MissingDecoder(usize),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;
