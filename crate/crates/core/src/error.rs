use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ResaError {
    #[error("empty context")]
    EmptyContext,
    #[error("empty selection")]
    EmptySelection,
    #[error("block full")]
    BlockFull,
    #[error("rectify window misaligned: start {start} + window {window} != cache length {len}")]
    RectifyMisaligned { start: usize, window: usize, len: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("bad weight header")]
    BadWeightHeader,
    #[error("bad kv snapshot header")]
    BadSnapshotHeader,
    #[error("oracle length {len} exceeds the limit of {limit} tokens")]
    OracleTooLong { len: usize, limit: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = ResaError> = std::result::Result<T, E>;
