//! Experiment runner for the differentially private asynchronous gossip SGD
//! simulator: JSON configs, trace files and the subcommands behind the
//! `adp2sgd` binary.

pub mod commands;
pub mod config;
pub mod trace_file;

pub use config::{parse_config, ConfigError, ExperimentConfig};
