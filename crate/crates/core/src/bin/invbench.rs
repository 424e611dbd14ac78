//! Command-line front end for the inversion benchmark pipeline.
//!
//! Exit codes: 0 success, 1 stage failure, 2 configuration error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use invbench::harness::{run_experiment, ExperimentSpec, RunOptions, StageDepth};
use invbench::Error;

#[derive(Parser)]
#[command(name = "invbench", version, about = "Model-inversion robustness/privacy benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Skip stages whose outputs already exist under a matching config hash.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    resume: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train the declared models (and prepare data).
    Train(CommonArgs),
    /// Run the declared attacks (training anything missing first).
    Attack(CommonArgs),
    /// Compute privacy metrics over existing reconstructions.
    Evaluate(CommonArgs),
    /// Emit the summary and trade-off tables.
    Report(CommonArgs),
    /// Full pipeline: train, attack, evaluate, report.
    Run(CommonArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let (args, depth) = match &cli.command {
        Command::Train(a) => (a, StageDepth::Train),
        Command::Attack(a) => (a, StageDepth::Attack),
        Command::Evaluate(a) => (a, StageDepth::Evaluate),
        Command::Report(a) | Command::Run(a) => (a, StageDepth::Report),
    };

    let mut spec = match ExperimentSpec::load(&args.config) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(dir) = &args.output_dir {
        spec.output_dir = dir.clone();
    }
    if let Err(e) = spec.validate() {
        eprintln!("config error: {e}");
        return ExitCode::from(2);
    }

    let opts = RunOptions {
        resume: args.resume,
        depth,
    };
    match run_experiment(spec, opts) {
        Ok(manifest) => {
            println!("ok: {} stages recorded", manifest.entries.len());
            ExitCode::SUCCESS
        }
        Err(e @ Error::Config(_)) => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("stage failure: {e}");
            ExitCode::from(1)
        }
    }
}
