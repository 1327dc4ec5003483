use thiserror::Error;

/// Errors produced anywhere in the recognition and analysis pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(
        "infeasible alignment: {frames} frames cannot emit {labels} labels with {repeats} adjacent repeats"
    )]
    InfeasibleAlignment {
        frames: usize,
        labels: usize,
        repeats: usize,
    },

    #[error("brute-force enumeration refused: T={frames} exceeds the bound of {bound}")]
    EnumerationBound { frames: usize, bound: usize },

    #[error("segment ({start}, {end}) is longer than {max_len} s and has no usable word boundary")]
    UnsplittableSegment { start: f64, end: f64, max_len: f64 },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("optimizer state error: {0}")]
    State(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error("undefined rate: {0}")]
    UndefinedRate(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
