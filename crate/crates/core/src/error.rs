use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CctError> = std::result::Result<T, E>;

/// Which half of a tokenizer stage a geometry failure belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StagePhase {
    Conv,
    Pool,
}

impl std::fmt::Display for StagePhase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StagePhase::Conv => f.write_str("conv"),
            StagePhase::Pool => f.write_str("pool"),
        }
    }
}

#[derive(Debug, Error)]
pub enum CctError {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    /// A spatial extent collapsed. `stage` is 1-based; `None` when raised by a bare op.
    #[error("tokenizer geometry: {}{phase}: {detail}", .stage.map(|s| format!("stage {s} ")).unwrap_or_default())]
    TokenizerGeometry { stage: Option<usize>, phase: StagePhase, detail: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: String, expected: u32 },

    #[error("checkpoint integrity check failed: {0}")]
    CheckpointIntegrity(String),

    #[error("checkpoint truncated: {0}")]
    CheckpointTruncated(String),

    #[error("checkpoint parameter {name} has shape {found:?}, config expects {expected:?}")]
    CheckpointShape { name: String, expected: Vec<usize>, found: Vec<usize> },

    #[error("image decode failed for {path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl CctError {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CctError::Io { context: context.into(), source }
    }
}
