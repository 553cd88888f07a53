use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use metta_cli::{commands, ExperimentConfig, Run};

#[derive(Parser)]
#[command(
    name = "metta",
    version,
    about = "Mean embeddings with test-time augmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate (or import) the train and test datasets.
    GenData,
    /// Train the backbone under the training augmentation.
    TrainBackbone,
    /// Fit the linear evaluation head on the frozen backbone.
    TrainLinear,
    /// Central-crop, TTA and MeTTA linear evaluation.
    Eval,
    /// Loss along interpolations towards the mean embedding.
    Interp,
    /// Spread of predictions across augmentation samples.
    Jitter,
    /// Multi-scale retrieval sanity checks and recall report.
    Retrieve,
    /// Finite-difference gradient checks of every differentiable op.
    GradCheck,
    /// Randomized property suites.
    Selftest,
}

fn run(cli: Cli) -> Result<bool> {
    let load = || -> Result<Run> {
        let path = cli
            .config
            .as_ref()
            .context("missing required argument --config <path>")?;
        Run::new(ExperimentConfig::load(path)?, cli.out.clone(), cli.seed)
    };
    match cli.command {
        Command::GenData => commands::gen_data(&load()?)?,
        Command::TrainBackbone => commands::train_backbone_cmd(&load()?)?,
        Command::TrainLinear => commands::train_linear_cmd(&load()?)?,
        Command::Eval => commands::eval_cmd(&load()?)?,
        Command::Interp => commands::interp_cmd(&load()?)?,
        Command::Jitter => commands::jitter_cmd(&load()?)?,
        Command::Retrieve => commands::retrieve_cmd(&load()?)?,
        Command::GradCheck => {
            let out = match (&cli.out, &cli.config) {
                (Some(o), _) => Some(o.clone()),
                (None, Some(_)) => Some(load()?.out),
                (None, None) => None,
            };
            return commands::grad_check_cmd(out.as_deref(), cli.seed.unwrap_or(0));
        }
        Command::Selftest => return commands::selftest_cmd(),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("metta: error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
