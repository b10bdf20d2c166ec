//! Experiment runner for the MRC reward finetuning pipeline: configuration,
//! run-directory layout, the pipeline stages and SVG plots.

use std::io;

use thiserror::Error;

pub mod config;
pub mod plot;
pub mod stages;

pub use config::RunConfig;
pub use stages::{run_stage, RunDir, Stage};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("stage failed: {0}")]
    Stage(String),
    #[error(transparent)]
    Core(#[from] mvrc_core::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl CliError {
    /// 2 config, 3 missing prerequisite, 4 any stage failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingPrerequisite(_) => 3,
            _ => 4,
        }
    }
}
