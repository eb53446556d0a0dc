//! SR-LSTM: pedestrian trajectory prediction with states refinement.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod introspect;
pub mod lstm;
pub mod model;
pub mod optim;
pub mod params;
pub mod refine;
pub mod tensor;
pub mod train;

pub use error::{CheckpointError, DataError, EvalError, ExperimentError, NumericError, TrainError};
pub use params::ParamStore;
pub use tensor::Tensor2;
