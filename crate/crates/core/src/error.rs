use std::fmt;

use crate::ledger::{StageTag, Tier};

/// Raised when an allocation or inbound transfer would push fast-tier
/// occupancy above the configured budget.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BudgetExceeded {
    pub stage: StageTag,
    pub requested: u64,
    pub occupancy: u64,
    pub limit: u64,
}

impl fmt::Display for BudgetExceeded {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "out of fast-tier memory in stage {}: {} B requested with {} B live, limit {} B",
            self.stage, self.requested, self.occupancy, self.limit
        )
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("region out of bounds: {0}")]
    OutOfBounds(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite input: {0}")]
    NonFinite(String),
    #[error("{0}")]
    Budget(BudgetExceeded),
    #[error("ledger: {0}")]
    Ledger(String),
    #[error("cache: {0}")]
    Cache(String),
    #[error("entry already resident on {0:?} tier")]
    AlreadyOnTier(Tier),
    #[error("transfer engine shut down")]
    EngineShutdown,
    #[error("timeline: {0}")]
    Timeline(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
