//! Command implementations behind the `e2g` binary.

pub mod analysis;
pub mod config;
pub mod run;

use thiserror::Error;

use e2g_core::llm_backend::BackendError;
use e2g_core::pipeline::PipelineError;
use e2g_core::runstore::StoreError;
use e2g_core::task_model::TaskError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Dataset(#[from] TaskError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Dataset(_) => EXIT_CONFIG,
            CliError::Backend(BackendError::Config(_)) => EXIT_CONFIG,
            _ => EXIT_FAILURE,
        }
    }
}
