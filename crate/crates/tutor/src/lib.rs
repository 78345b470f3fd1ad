//! Command-line workbench around `tutor-core`: run configuration, dataset
//! manifests, checkpoints, metrics streams and the export formats.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

pub use checkpoint::Checkpoint;
pub use config::{Overrides, Profile, RunConfig};
pub use error::{CliError, Result};
