use thiserror::Error;

use crate::transcript::Transcript;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// A model returned something its contract forbids.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ContractViolation {
    #[error("score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("mask token left at position {0} after denoising")]
    MaskRemaining(usize),
    #[error("non-editable position {position} changed from {before} to {after}")]
    LocalityBroken { position: usize, before: u32, after: u32 },
    #[error("denoiser returned {got} tokens, expected {expected}")]
    LengthChanged { expected: usize, got: usize },
    #[error("model returned {got} results for {expected} requests")]
    BatchMisaligned { expected: usize, got: usize },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("block has {got} tokens, expected {expected}")]
    BlockLength { expected: usize, got: usize },
    #[error("block contains the mask token at offset {0}")]
    MaskInBlock(usize),
    #[error("prompt contains the mask token at offset {0}")]
    MaskInPrompt(usize),
    #[error("block index {index} out of range ({n_blocks} blocks)")]
    BlockOutOfRange { index: usize, n_blocks: usize },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(#[from] ContractViolation),
    #[error("model transport failure: {0}")]
    Transport(String),
    #[error("task generation failed: {0}")]
    Task(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace decode: {0}")]
    Trace(#[from] serde_json::Error),
}

impl Error {
    /// Transport failures may be retried or skipped; everything else is fatal.
    pub fn is_transport(&self) -> bool {
        matches!(self, Error::Transport(_))
    }
}

/// A run aborted part-way; carries every transcript recorded up to the failure.
#[derive(Debug, Error)]
#[error("run aborted: {source}")]
pub struct RunFailure {
    #[source]
    pub source: Error,
    pub transcripts: Vec<Transcript>,
}

impl RunFailure {
    pub fn new(source: Error, transcripts: Vec<Transcript>) -> Self {
        Self { source, transcripts }
    }
}
