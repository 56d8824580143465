//! Experiment harness: configuration, run logs, and the CLI commands.

pub mod commands;
pub mod config;
pub mod runlog;

pub use commands::{cmd_eval, cmd_table, cmd_train, EvalOptions, TrainOptions};
pub use config::ExperimentConfig;
pub use runlog::{RunLog, RunLogWriter, RUNLOG_VERSION};
