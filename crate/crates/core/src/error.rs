use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HleError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("instance index {0} out of range [0, 1000)")]
    InstanceIndexOutOfRange(u32),

    #[error("instance {id} spans semantic classes {first} and {second}")]
    InstanceSpansClasses { id: u32, first: u32, second: u32 },

    #[error("empty pixel set")]
    EmptyPixelSet,

    #[error("bandwidth must be positive, got {0}")]
    NonPositiveBandwidth(f64),

    #[error("brute-force oracle limited to {max} elements, got {got}")]
    ProblemTooLarge { got: usize, max: usize },

    #[error("coincident points {0} and {1}")]
    CoincidentPoints(usize, usize),

    #[error("invalid catalog: {0}")]
    InvalidCatalog(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid scene spec: {0}")]
    InvalidScene(String),

    #[error("validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("training diverged at step {step}: total loss {total} against initial {initial}")]
    Diverged { step: usize, total: f64, initial: f64 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, HleError>;
