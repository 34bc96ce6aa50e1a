use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod error;

use commands::{Outcome, Run};

type CommandFn = fn(&Run) -> Result<Outcome, error::CliError>;

/// Experiments on degenerate third-order evolution equations.
///
/// Exit status: 0 on success, 1 when a quantitative check fails, 2 on a
/// usage, configuration or runtime error.
#[derive(Debug, Parser)]
#[command(name = "gevolab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the well-posedness class of the profile as JSON.
    Classify(RunArgs),
    /// Check the symbol estimates of the weight.
    Symbols(RunArgs),
    /// Measure invertibility of the conjugator along the h ladder.
    Invert(RunArgs),
    /// Solve the model problem and run the conservation and energy checks.
    Evolve(RunArgs),
    /// Probe the Gevrey threshold for each theta in the list.
    Probe(RunArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML config, or a manifest.json from an earlier run.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides output.dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the seed key.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (args, command): (&RunArgs, CommandFn) = match &cli.command {
        Command::Classify(a) => (a, commands::classify_cmd),
        Command::Symbols(a) => (a, commands::symbols_cmd),
        Command::Invert(a) => (a, commands::invert_cmd),
        Command::Evolve(a) => (a, commands::evolve_cmd),
        Command::Probe(a) => (a, commands::probe_cmd),
    };
    let result = Run::load(&args.config, args.out.clone(), args.seed).and_then(|run| command(&run));
    match result {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
