//! Command-line driver: data preparation, training, evaluation, prediction,
//! gradient checking and introspection.

pub mod cache;
pub mod commands;
pub mod config;
pub mod error;

pub use config::{Resolved, RunConfig};
pub use error::CliError;
