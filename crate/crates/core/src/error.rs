use thiserror::Error;

/// Errors produced by the shape recovery and uncertainty pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid specification: {0}")]
    Spec(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("degenerate alignment: cross matrix between factor pairs is zero")]
    DegenerateAlignment,

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("Monte Carlo trial {index} failed: {source}")]
    Trial {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("segments leave frames {start}..{end} uncovered")]
    Coverage { start: usize, end: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}
