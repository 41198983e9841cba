//! Config-driven pipeline: phantom → train → segment → reconstruct → deform → evaluate,
//! with a content-hash manifest, stage caching and a run summary.

pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod reports;

pub use config::{parse_config, PipelineConfig, Stage};
pub use manifest::{Manifest, StageRecord};
pub use pipeline::{derive_seed, run_pipeline, run_stages, RunReport, StageStatus};
pub use reports::{emit_reports, Summary};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage {stage}: missing inputs {}", .missing.join(", "))]
    Dependency { stage: Stage, missing: Vec<String> },
    #[error("stage {stage} failed: {message}")]
    Stage { stage: Stage, message: String },
    #[error("missing stage outputs: {}", .0.join(", "))]
    MissingOutputs(Vec<String>),
    #[error("io error: {0}")]
    Io(String),
}

impl PipelineError {
    /// 2 for configuration and dependency errors, 3 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Dependency { .. } => 2,
            _ => 3,
        }
    }
}
