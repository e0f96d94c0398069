//! Experiment configuration, multi-seed runs and plotting for the `darc` binary.

pub mod config;
pub mod experiment;
pub mod plot;

pub use config::{emit_config, parse_config, ConfigError, ExperimentConfig, ExperimentKind};
pub use experiment::{output_root, run_experiment, RunError, RunOutcome, OUTPUT_ROOT_VAR};
