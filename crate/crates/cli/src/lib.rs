//! Command-line entry points for the pretraining engine and the lane
//! benchmark: `gen-data`, `pretrain`, `finetune`, `eval` and `ablate`.
//!
//! Every command reads a [`config::RunConfig`] TOML file (unknown keys are
//! errors), applies flag overrides and writes the resolved config next to its
//! outputs. The SHA-256 of that resolved text is stamped into checkpoints,
//! dataset manifests and reports.

pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;

pub use config::{Overrides, RunConfig};
pub use error::{CliError, Result};
