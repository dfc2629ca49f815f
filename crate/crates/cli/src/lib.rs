//! Command-line experiments: train, evaluate, export mined domains, profile
//! costs and sweep the codebook size.

pub mod commands;
pub mod config;
pub mod manifest;

use std::path::PathBuf;

use adaptive2::evalprof::Stage;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::commands::ProfileSource;
use crate::config::{ConfigError, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "adaptive2", version, about = "Latent domain mining and routed CTR models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(long, short)]
    pub config: PathBuf,
    /// Dotted-path override, e.g. `training.seed=7`; repeatable.
    #[arg(long = "override", short = 'o', value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, ConfigError> {
        RunConfig::load(&self.config, &self.overrides)
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum StageArg {
    /// Projected input, before the miner's encoder.
    Pre,
    /// Encoder output.
    Post,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Stage {
        match s {
            StageArg::Pre => Stage::PreEncoder,
            StageArg::Post => Stage::PostEncoder,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint, history, metrics and manifest.
    Train(ConfigArgs),
    /// Score a checkpoint on one split of the configured data.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Defaults to the checkpoint in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "val", value_parser = ["train", "val", "test", "all"])]
        split: String,
    },
    /// Write each sample's domain index and a 2-D PCA projection.
    ExportDomains {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "post")]
        stage: StageArg,
        #[arg(long, default_value = "all", value_parser = ["train", "val", "test", "all"])]
        split: String,
    },
    /// FLOPs and parameter counts, with the FLOPs-matched MLP baseline.
    Profile {
        #[arg(long, short, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
        config: Option<PathBuf>,
        #[arg(long = "override", short = 'o', value_name = "KEY=VALUE", requires = "config")]
        overrides: Vec<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 4096)]
        batch: usize,
        /// Print JSON instead of the text table.
        #[arg(long)]
        json: bool,
    },
    /// Train once per codebook size and report AUC, NMI and code usage.
    SweepM {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        m_values: Vec<usize>,
        /// Concurrent runs.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
}

/// Exit status for a failed command: 2 for configuration problems, 3 for
/// failures while running.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return EXIT_CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<adaptive2::Error>() {
            return match e {
                adaptive2::Error::Config(_) | adaptive2::Error::Row { .. } => EXIT_CONFIG,
                _ => EXIT_RUNTIME,
            };
        }
    }
    EXIT_RUNTIME
}

pub fn execute(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Train(args) => {
            commands::cmd_train(&args.load()?)?;
        }
        Command::Evaluate { config, checkpoint, split } => {
            commands::cmd_evaluate(&config.load()?, checkpoint.as_deref(), split)?;
        }
        Command::ExportDomains {
            config,
            checkpoint,
            stage,
            split,
        } => {
            commands::cmd_export_domains(&config.load()?, checkpoint.as_deref(), (*stage).into(), split)?;
        }
        Command::Profile {
            config,
            overrides,
            checkpoint,
            batch,
            json,
        } => {
            if *batch == 0 {
                return Err(ConfigError("--batch must be >= 1".into()).into());
            }
            match (config, checkpoint) {
                (Some(path), _) => {
                    let cfg = RunConfig::load(path, overrides)?;
                    commands::cmd_profile(ProfileSource::Config(&cfg), *batch, *json)?;
                }
                (None, Some(path)) => {
                    commands::cmd_profile(ProfileSource::Checkpoint(path), *batch, *json)?;
                }
                (None, None) => unreachable!("clap requires one source"),
            }
        }
        Command::SweepM { config, m_values, parallel } => {
            commands::cmd_sweep_m(&config.load()?, m_values, *parallel)?;
        }
    }
    Ok(())
}

/// Runs a parsed command line and returns the process exit status.
pub fn run(cli: &Cli) -> i32 {
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
