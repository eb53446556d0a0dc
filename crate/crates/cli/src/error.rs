use std::path::{Path, PathBuf};

use thiserror::Error;

use srlstm::{CheckpointError, DataError, EvalError, ExperimentError, NumericError, TrainError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("missing file: {}", .0.display())]
    Missing(PathBuf),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    NonFinite(String),
    #[error("{0}")]
    Mismatch(String),
    #[error("gradient check failed: parameter `{param}` has relative error {error:.3e}")]
    GradCheck { param: String, error: f64 },
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Missing(_) => 2,
            CliError::NonFinite(_) => 3,
            CliError::Mismatch(_) => 4,
            CliError::GradCheck { .. } => 5,
            CliError::Config(_) | CliError::Other(_) => 1,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::Missing(path.to_path_buf())
        } else {
            CliError::Other(format!("{}: {e}", path.display()))
        }
    }
}

impl From<NumericError> for CliError {
    fn from(e: NumericError) -> Self {
        match e {
            NumericError::NonFinite(_) | NumericError::NonFiniteGradient(_) => CliError::NonFinite(e.to_string()),
            NumericError::Shape { .. } | NumericError::UnknownParameter(_) => CliError::Mismatch(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => CliError::NonFinite(e.to_string()),
            TrainError::Numeric(n) => n.into(),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { path, source } => CliError::io(&path, source),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::UnknownVariant(_) | EvalError::UnknownPreproc(_) => CliError::Config(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Mismatch(_) => CliError::Mismatch(e.to_string()),
            CheckpointError::Numeric(n) => n.into(),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Data(e) => e.into(),
            ExperimentError::Eval(e) => e.into(),
            ExperimentError::Train(e) => e.into(),
            ExperimentError::Numeric(e) => e.into(),
        }
    }
}
