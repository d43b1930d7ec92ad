use stagecache_core::{BudgetExceeded, Error};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Budget(BudgetExceeded),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Engine(Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl From<Error> for HarnessError {
    fn from(e: Error) -> Self {
        match e {
            Error::Budget(b) => HarnessError::Budget(b),
            other => HarnessError::Engine(other),
        }
    }
}

impl HarnessError {
    /// Process exit code: 2 config, 3 budget abort, 4 invariant, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Budget(_) => 3,
            HarnessError::Invariant(_) => 4,
            HarnessError::Engine(_) | HarnessError::Io(_) => 1,
        }
    }
}
