//! Pipeline commands behind the `moltext` binary, plus the checkpoint
//! container and run configuration they share.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod manifest;

use std::path::Path;

use serde_json::json;

pub use checkpoint::{
    load_checkpoint, restore_dual_encoder, restore_flow, save_checkpoint, Checkpoint,
    CheckpointError, ModelSnapshot, RngState,
};
pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("bad arguments: {0}")]
    Usage(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{stage}: {msg}")]
    Pipeline { stage: &'static str, msg: String },
}

impl CliError {
    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        }
    }

    pub fn stage(stage: &'static str, e: impl std::fmt::Display) -> Self {
        CliError::Pipeline {
            stage,
            msg: e.to_string(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Io { .. } => "io",
            CliError::Config(_) => "config",
            CliError::Usage(_) => "usage",
            CliError::Checkpoint(CheckpointError::VersionMismatch { .. }) => "version_mismatch",
            CliError::Checkpoint(CheckpointError::ShapeMismatch { .. }) => "shape_mismatch",
            CliError::Checkpoint(CheckpointError::CorruptFile(_)) => "corrupt_file",
            CliError::Checkpoint(CheckpointError::Io { .. }) => "io",
            CliError::Pipeline { .. } => "pipeline",
        }
    }

    /// One-line JSON error record.
    pub fn record(&self) -> String {
        let mut r = json!({ "error": self.kind(), "message": self.to_string() });
        let path = match self {
            CliError::Io { path, .. } | CliError::Checkpoint(CheckpointError::Io { path, .. }) => {
                Some(path.clone())
            }
            _ => None,
        };
        if let Some(p) = path {
            r["path"] = json!(p);
        }
        r.to_string()
    }
}
