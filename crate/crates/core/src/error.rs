//! Error taxonomy shared by every subsystem.

use thiserror::Error;

/// All failure modes the framework can surface.
#[derive(Debug, Error)]
pub enum HgcpError {
    /// A forward pass produced NaN or Inf; carries the offending primitive.
    #[error("numerical divergence in primitive `{primitive}`")]
    NumericalDivergence { primitive: &'static str },

    /// Array shapes do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid configuration, arena name, or checkpoint/protocol pairing.
    #[error("config error: {0}")]
    Config(String),

    /// A training batch with zero elements.
    #[error("empty batch")]
    EmptyBatch,

    /// Replay buffer cannot satisfy the requested sample.
    #[error("not enough data: {0}")]
    NotEnoughData(String),

    /// A goal code whose rows are not one-hot in eval mode.
    #[error("malformed goal code: {0}")]
    Code(String),

    /// An operation was called outside its protocol contract.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// An imagination horizon too short for lambda-returns.
    #[error("insufficient horizon: {0} (need >= 2)")]
    InsufficientHorizon(usize),

    /// A malformed CSV or config file; carries the line number.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl HgcpError {
    /// Process exit code per the CLI contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            HgcpError::NumericalDivergence { .. } => 3,
            _ => 2,
        }
    }
}
