use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("domain error in {op} at index {index}: value {value}")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },

    #[error("index {id} out of range [0, {bound}) at position {position}")]
    Index {
        position: usize,
        id: f64,
        bound: usize,
    },

    #[error("invalid axis {axis} for rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("unsupported op: {0}")]
    UnsupportedOp(String),

    #[error("strategy {strategy} does not support model {model}: {reason}")]
    UnsupportedArchitecture {
        strategy: String,
        model: String,
        reason: String,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("trace error: {0}")]
    Trace(String),

    #[error("format error at byte offset {offset}: {detail}")]
    Format { offset: usize, detail: String },

    #[error("out of memory: need {needed} bytes, cap is {cap}")]
    OutOfMemory { needed: u64, cap: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
