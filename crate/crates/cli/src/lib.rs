//! Experiment driver: configuration, on-disk datasets, baseline and policy
//! runs, and CSV output.

pub mod commands;
pub mod config;
pub mod results;

pub use commands::{
    cmd_baselines, cmd_eval, cmd_generate, cmd_reproduce, cmd_sl, cmd_train, diff_runs, ensure_dataset, Run,
};
pub use config::{ExperimentConfig, LoadedConfig};
pub use results::ResultRow;
