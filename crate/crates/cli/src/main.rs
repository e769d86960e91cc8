//! `qsd` — quasi-stationary distributions of absorbed diffusions from the
//! command line. Running with flags alone samples and solves a QSD; the
//! `sensitivity`, `couple`, and `solve` subcommands cover the other
//! pipelines. All outputs land in `--out-dir` and are reproducible
//! byte-for-byte from the configuration and seed.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{cmd_couple, cmd_qsd, cmd_sensitivity, cmd_solve, Failure};
use config::{load_config_file, RunConfig};

#[derive(Debug, Args)]
struct CommandArgs {
    /// TOML config file; command-line flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,

    #[command(flatten)]
    flags: RunConfig,
}

#[derive(Debug, Parser)]
#[command(
    name = "qsd",
    about = "Quasi-stationary distributions of absorbed diffusions",
    args_conflicts_with_subcommands = true
)]
struct Cli {
    #[command(subcommand)]
    command: Option<Cmd>,

    #[command(flatten)]
    default_args: CommandArgs,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Sample a regenerating trajectory, estimate the killing rate, and
    /// solve for the QSD density (also the default when no subcommand is
    /// given).
    Qsd(CommandArgs),
    /// Bound the distance between the QSD and the stationary law of the
    /// matching unkilled process.
    Sensitivity(CommandArgs),
    /// Collect coupling times for a pair of chains and fit the contraction
    /// rate of their tail.
    Couple(CommandArgs),
    /// Re-run the constrained solve on an existing sampled density.
    Solve(CommandArgs),
}

fn merged_config(args: CommandArgs) -> Result<RunConfig, Failure> {
    let CommandArgs { config, flags } = args;
    match config {
        None => Ok(flags),
        Some(path) => {
            let file = load_config_file(&path).map_err(Failure::Config)?;
            Ok(flags.merged_over(file))
        }
    }
}

fn init_workers(cfg: &RunConfig) {
    let from_env = std::env::var("QSD_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok());
    if let Some(n) = cfg.workers.or(from_env) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn run() -> Result<i32, Failure> {
    let cli = Cli::parse();
    let (name, args): (&str, CommandArgs) = match cli.command {
        Some(Cmd::Qsd(args)) => ("qsd", args),
        Some(Cmd::Sensitivity(args)) => ("sensitivity", args),
        Some(Cmd::Couple(args)) => ("couple", args),
        Some(Cmd::Solve(args)) => ("solve", args),
        None => ("qsd", cli.default_args),
    };
    let cfg = merged_config(args)?;
    if cfg.experiment.is_none() {
        return Err(Failure::Config(format!(
            "nothing to do: `{name}` needs --experiment or a --config file; see --help"
        )));
    }
    init_workers(&cfg);
    match name {
        "qsd" => cmd_qsd(&cfg),
        "sensitivity" => cmd_sensitivity(&cfg),
        "couple" => cmd_couple(&cfg),
        _ => cmd_solve(&cfg),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code as u8),
        Err(failure) => {
            eprintln!("error: {}", failure.message());
            ExitCode::from(failure.exit_code() as u8)
        }
    }
}
