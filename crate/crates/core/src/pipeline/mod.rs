//! File-mediated stages from corpus generation to reports, with a locked run
//! directory, an append-only manifest of artifact digests, the low-resource
//! sweep and the human-labeling pair export.

mod config;
mod manifest;
mod report;
mod stages;

use std::path::Path;

pub use config::{canonical, FoldConfig, HitlConfig, PathsConfig, PipelineConfig, PolicySection, SweepConfig};
pub use manifest::{ManifestEntry, RunDir, LOCK_FILE, MANIFEST_FILE};
pub use report::{median, median_index, mode_name, render_table, EvalReport, PipelineReport};
pub use stages::{
    low_resource_run, run_stage, LowResourceRun, SeedScore, SkippedFraction, Stage, StageOptions, SweepCell, SweepReport,
};

use crate::labels::LabelError;
use crate::metrics::MetricError;
use crate::policy::PolicyError;
use crate::prefreward::RewardError;
use crate::toywoz::EnvError;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact `{path}`{}", expected_note(.expected))]
    MissingArtifact { path: String, expected: Option<String> },
    #[error("artifact `{path}` has digest {actual}, manifest expects {expected}")]
    DigestMismatch { path: String, expected: String, actual: String },
    #[error("corrupt artifact `{path}`: {reason}")]
    Corrupt { path: String, reason: String },
    #[error("run directory is locked by another writer ({0})")]
    Locked(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Label(#[from] LabelError),
}

fn expected_note(expected: &Option<String>) -> String {
    match expected {
        Some(d) => format!(" (expected digest {d})"),
        None => " (no stage in the manifest produced it)".to_string(),
    }
}

impl PipelineError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.display().to_string(), source }
    }

    /// Process exit code: 2 for configuration errors, 3 for missing or corrupt
    /// predecessor artifacts, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::MissingArtifact { .. } | Self::DigestMismatch { .. } | Self::Corrupt { .. } => 3,
            _ => 1,
        }
    }
}
