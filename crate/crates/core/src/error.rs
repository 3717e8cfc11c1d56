use thiserror::Error;

/// Errors produced anywhere in the harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("tape is stale: parameters changed after the recording forward pass")]
    StaleTape,
    #[error("tape was not recorded")]
    MissingTape,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("malformed payload: {0}")]
    Decode(String),
    #[error("payload of {0} bytes exceeds the frame limit")]
    Oversize(usize),
    #[error("peer {peer} disconnected")]
    Disconnected { peer: String },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("support violation: Z is zero where X is positive at index {0}")]
    SupportViolation(usize),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
