use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid argument for {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("priority map mass not positive after aggregation (degenerate stage weights)")]
    DegenerateMass,

    #[error("fixation ({row:.2}, {col:.2}) puts the {win_h}x{win_w} window outside the {src_h}x{src_w} source")]
    WindowOutOfBounds {
        row: f64,
        col: f64,
        win_h: usize,
        win_w: usize,
        src_h: usize,
        src_w: usize,
    },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint version {found} not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint block {name}: stored shape {stored:?} does not match configured shape {expected:?}")]
    CheckpointShape {
        name: String,
        stored: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
