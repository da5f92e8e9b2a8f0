//! Error type shared across the toolkit.

use thiserror::Error;

/// Errors produced by quantizer math, network execution, training and I/O.
#[derive(Error, Debug)]
pub enum QilError {
    #[error("invalid bit width {0}: must be in 2..=24")]
    InvalidBitWidth(u32),

    #[error("invalid quantizer parameters: {0}")]
    InvalidParams(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("pruning ratio undefined for an empty tensor")]
    EmptyTensor,

    #[error("level {level} out of range for {bits}-bit {kind} tensor")]
    LevelOutOfRange {
        level: i32,
        bits: u32,
        kind: &'static str,
    },

    #[error("degenerate quantizer initialization: {0}")]
    DegenerateInit(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("inconsistent forward cache: {0}")]
    State(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, QilError>;
