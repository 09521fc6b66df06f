//! Experiment runner for splitguard: a flat key-value configuration, six
//! subcommands and reproducible output directories with checksummed
//! manifests.

pub mod commands;
pub mod config;
pub mod output;

pub use commands::{cmd_attack, cmd_eval, cmd_export, cmd_mi, cmd_sweep, cmd_train, run, Outcome};
pub use config::{Command, ConfigError, ExperimentConfig, RawConfig};
pub use output::{sha256_hex, Manifest};
