//! Command-line front end: synthetic corpora, training, evaluation,
//! inference and factor inspection.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod render;

pub use commands::Common;
pub use config::{Ablation, Overrides, RunConfig};
pub use error::{CliError, Result};
