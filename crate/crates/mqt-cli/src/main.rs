//! `mqt` — config-driven training, budget sweeps, ablations, FLOPs reports,
//! and attention export for the elastic query-transformer pipeline.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod cmds;

use cmds::CliError;

#[derive(Debug, Parser)]
#[command(name = "mqt", version, about = "Elastic visual-token experiments")]
struct Cli {
    /// Override the seed from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory for output artifacts.
    #[arg(long, global = true, default_value = "mqt-out")]
    out_dir: PathBuf,

    /// Config file: the training config for `train`/`ablate`, or a resolved
    /// snapshot written by a previous run for the other subcommands.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Run the two-stage schedule from a config file and write a checkpoint.
    Train(cmds::train::TrainArgs),
    /// Evaluate a checkpoint across token budgets and write a CSV.
    Sweep(cmds::sweep::SweepArgs),
    /// Run the ablation matrix around a base config.
    Ablate(cmds::ablate::AblateArgs),
    /// Analytic FLOPs report and speed-up ratios.
    Flops(cmds::flops::FlopsArgs),
    /// Export head-averaged attention maps as CSV.
    ExportAttn(cmds::export_attn::ExportAttnArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Train(args) => cmds::train::run(&cli.out_dir, cli.config.as_deref(), cli.seed, args),
        Cmd::Sweep(args) => cmds::sweep::run(&cli.out_dir, cli.config.as_deref(), args),
        Cmd::Ablate(args) => cmds::ablate::run(&cli.out_dir, cli.config.as_deref(), cli.seed, args),
        Cmd::Flops(args) => cmds::flops::run(&cli.out_dir, cli.config.as_deref(), args),
        Cmd::ExportAttn(args) => cmds::export_attn::run(&cli.out_dir, cli.config.as_deref(), args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
