//! Library side of the `due` command: configuration, model files, run
//! manifests and the experiment protocols behind the demos.

pub mod commands;
pub mod config;
pub mod experiments;
pub mod manifest;
pub mod modelfile;
pub mod output;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {message}")]
    Config { key: Option<String>, message: String },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("model file error: {0}")]
    Model(#[from] modelfile::ModelFileError),
    #[error("training failed: {0}")]
    Train(#[from] due_core::training::TrainError),
    #[error("data error: {0}")]
    Data(#[from] due_core::datasets::DataError),
    #[error("metric error: {0}")]
    Metric(#[from] due_core::metrics::MetricError),
    #[error("self-check failed: {}", .0.join(", "))]
    CheckFailed(Vec<String>),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<due_core::numcore::NumError> for CliError {
    fn from(e: due_core::numcore::NumError) -> Self {
        CliError::Train(e.into())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
