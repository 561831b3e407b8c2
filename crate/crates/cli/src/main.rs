//! `wasi`: decomposition, rank planning, cost sweeps and training runs.

mod commands;
mod config;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Failure;

#[derive(Parser, Debug)]
#[command(name = "wasi", version, about = "Low-rank weight and activation training engine")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Config file with `[train]`, `[model]`, `[data]`, `[plan]`, `[cost]` and
    /// `[decompose]` sections. Flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory for every artifact a command writes.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Seed; falls back to the config, then `WASI_SEED`, then 0.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for the perplexity scan.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Truncated SVD of a matrix or HOSVD of a tensor, written as factor blobs.
    Decompose(commands::decompose::DecomposeArgs),
    /// Perplexity scan and activation-rank selection under a budget or target.
    Plan(commands::plan::PlanArgs),
    /// Analytic FLOP and memory sweep as CSV.
    Cost(commands::cost::CostArgs),
    /// Train a toy classifier and write the run record and a checkpoint.
    Train(commands::train::TrainArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = config::Config::load(cli.global.config.as_deref()).and_then(|cfg| match cli.command {
        Command::Decompose(a) => commands::decompose::run(&cli.global, &cfg, a),
        Command::Plan(a) => commands::plan::run(&cli.global, &cfg, a),
        Command::Cost(a) => commands::cost::run(&cli.global, &cfg, a),
        Command::Train(a) => commands::train::run(&cli.global, &cfg, a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, error }) => {
            eprintln!("error: {error:#}");
            ExitCode::from(code)
        }
    }
}
