use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("softmax over an empty support")]
    EmptySupport,
    #[error("binary elementwise op needs a second operand")]
    MissingOperand,
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("parameter `{0}` is already registered")]
    DuplicateParameter(String),
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("duplicate observation for pedestrian {ped_id} at frame {frame_id}")]
    Duplicate { frame_id: i64, ped_id: i64 },
    #[error("frames for pedestrian {ped_id} are not increasing in file order (frame {frame_id})")]
    NonMonotone { frame_id: i64, ped_id: i64 },
    #[error("frame stride must be positive, got {0}")]
    BadStride(i64),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint does not match the model configuration: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss in batch {batch} of epoch {epoch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("loss is undefined: no (target, step) pairs in the mask")]
    EmptyLossMask,
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error("no training windows")]
    NoTrainingData,
}

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("metric is undefined without target pedestrians")]
    NoTargets,
    #[error("prediction/ground-truth length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("missing dataset for scene `{0}`")]
    MissingDataset(String),
    #[error("unknown ablation variant {0}")]
    UnknownVariant(u32),
    #[error("unknown preprocessing preset {0}")]
    UnknownPreproc(u32),
}

/// Failures of an end-to-end train/evaluate run.
#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
}
