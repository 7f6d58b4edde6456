//! Data ingestion, configuration, metrics and run orchestration for the `cvi` binary.

pub mod checks;
pub mod config;
pub mod data;
pub mod experiment;
pub mod metrics;
pub mod output;

use cvi::CviError;

/// Errors surfaced by the harness, each mapped to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(#[from] CviError),
    #[error("check failed: {0}")]
    CheckFailed(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Data(_) => 3,
            HarnessError::Numeric(_) | HarnessError::CheckFailed(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
