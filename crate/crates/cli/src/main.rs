use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bfe_cli::commands::{
    cmd_eval, cmd_gen_data, cmd_grad_check, cmd_sweep_queue, cmd_train, CliError,
};
use bfe_cli::config::ExperimentConfig;

/// Embedding-queue metric-learning experiment runner.
#[derive(Parser)]
#[command(name = "bfe", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config file (flat key=value lines).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's `out` key.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Optional config; only gradcheck_* keys are consulted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train with the embedding queue (or the baseline when capacity is 0).
    Train(CommonArgs),
    /// Evaluate a checkpoint: recall, rank-1 and TAR@FAR reports.
    Eval(CommonArgs),
    /// Train once per queue capacity and combine the final metrics.
    SweepQueue(CommonArgs),
    /// Generate and save the synthetic dataset described by the config.
    GenData(CommonArgs),
    /// Run the finite-difference gradient suite.
    GradCheck(GradCheckArgs),
}

fn load_config(args: &CommonArgs) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::from_file(&args.config)
        .map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(out) = &args.out {
        cfg.out = Some(out.clone());
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Train(args) => cmd_train(&load_config(args)?),
        Command::Eval(args) => cmd_eval(&load_config(args)?),
        Command::SweepQueue(args) => cmd_sweep_queue(&load_config(args)?),
        Command::GenData(args) => cmd_gen_data(&load_config(args)?),
        Command::GradCheck(args) => {
            let mut cfg = match &args.config {
                Some(path) => ExperimentConfig::from_file(path)
                    .map_err(|e| CliError::Config(e.to_string()))?,
                None => ExperimentConfig::default(),
            };
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            cmd_grad_check(&cfg)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bfe: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
