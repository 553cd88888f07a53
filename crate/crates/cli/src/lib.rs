//! Experiment configuration and the subcommands of the `metta` binary.
//! Subcommands exchange data only through files in the output directory.

pub mod commands;
pub mod config;

pub use commands::Run;
pub use config::ExperimentConfig;
