//! Experiment pipelines behind the `dgmlab` binary.

pub mod config;
pub mod pipeline;
pub mod record;

use std::path::PathBuf;

use thiserror::Error;

use dgmlab_core::attack::AttackError;
use dgmlab_core::defense::DefenseError;
use dgmlab_core::format::FormatError;
use dgmlab_core::metrics::MetricError;
use dgmlab_core::models::ModelError;
use dgmlab_core::sanitize::SanitizeError;
use dgmlab_core::tensor::TensorError;

pub use config::{parse_config, ConfigError, ExperimentConfig};
pub use pipeline::{replay, run, Command, Dirs};
pub use record::ExperimentRecord;

#[derive(Debug, Error)]
pub enum LabError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid experiment: {0}")]
    Invalid(String),
    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("numerical divergence: {0}")]
    Diverged(String),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
    #[error("malformed record {}: {reason}", path.display())]
    Record { path: PathBuf, reason: String },
    #[error(transparent)]
    Format(FormatError),
    #[error(transparent)]
    Failed(Box<dyn std::error::Error + Send + Sync>),
}

pub type Result<T> = std::result::Result<T, LabError>;

impl LabError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) | LabError::Invalid(_) => 2,
            LabError::MissingArtifact(_) => 3,
            LabError::Diverged(_) => 4,
            _ => 1,
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        LabError::Io { context: context.into(), source }
    }
}

impl From<ModelError> for LabError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Diverged { .. } => LabError::Diverged(e.to_string()),
            ModelError::Tensor(t) => t.into(),
            other => LabError::Invalid(other.to_string()),
        }
    }
}

impl From<AttackError> for LabError {
    fn from(e: AttackError) -> Self {
        match e {
            AttackError::Model(m) => m.into(),
            AttackError::Tensor(t) => t.into(),
            AttackError::Metric(m) => m.into(),
            other => LabError::Invalid(other.to_string()),
        }
    }
}

impl From<MetricError> for LabError {
    fn from(e: MetricError) -> Self {
        match e {
            MetricError::Model(m) => m.into(),
            other => LabError::Failed(Box::new(other)),
        }
    }
}

impl From<DefenseError> for LabError {
    fn from(e: DefenseError) -> Self {
        match e {
            DefenseError::Model(m) => m.into(),
            DefenseError::Metric(m) => m.into(),
            DefenseError::Format(f) => f.into(),
            DefenseError::Tensor(t) => t.into(),
            DefenseError::InvalidParameters(_) | DefenseError::Inapplicable(_) => LabError::Invalid(e.to_string()),
            other => LabError::Failed(Box::new(other)),
        }
    }
}

impl From<SanitizeError> for LabError {
    fn from(e: SanitizeError) -> Self {
        match e {
            SanitizeError::Diverged { .. } => LabError::Diverged(e.to_string()),
            SanitizeError::Model(m) => m.into(),
            SanitizeError::Metric(m) => m.into(),
            other => LabError::Invalid(other.to_string()),
        }
    }
}

impl From<FormatError> for LabError {
    fn from(e: FormatError) -> Self {
        LabError::Format(e)
    }
}

impl From<TensorError> for LabError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFiniteValue { .. } | TensorError::NonFiniteGradient { .. } => {
                LabError::Diverged(e.to_string())
            }
            other => LabError::Failed(Box::new(other)),
        }
    }
}
