//! File formats, experiment configuration and drivers for the `specbatch`
//! command line tool.

pub mod config;
pub mod error;
pub mod experiments;
pub mod formats;

pub use config::{ExperimentConfig, ExperimentKind, PolicySpec};
pub use error::{HarnessError, Result};
pub use experiments::Experiment;
