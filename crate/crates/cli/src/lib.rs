//! Experiment runner: configuration files, run directories, sweeps and
//! self-checks over the `biaslab` core.

pub mod cache;
pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod sweep;
pub mod verify;

use std::path::PathBuf;

use biaslab::analysis::AnalysisError;
use biaslab::models::ModelError;
use biaslab::tasks::TaskError;
use biaslab::theory::TheoryError;
use biaslab::training::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{} already exists and is not empty", .0.display())]
    Overlap(PathBuf),
    #[error("{0}")]
    Stage(String),
    #[error("verification failed: {0}")]
    Verify(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
