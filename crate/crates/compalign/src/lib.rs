//! File formats, experiment configuration and the train -> compress ->
//! evaluate pipeline built on `compalign-core`.

pub mod checkpoint;
pub mod compare;
pub mod config;
pub mod error;
pub mod experiment;
pub mod output;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
