use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use subcrit_lab::cli::{execute, ExperimentConfig, RunOptions, SEED_ENV, SUITES};
use subcrit_lab::Error;

#[derive(Parser)]
#[command(name = "subcrit-lab", version, about = "Subcritical branching systems with immigration: simulation, numerics and limit checks")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the suites listed in a config file.
    Run {
        config: PathBuf,
        /// Worker threads for replicate-level parallelism.
        #[arg(long)]
        workers: Option<usize>,
        /// Overrides SUBCRIT_SEED and sim.seed.
        #[arg(long)]
        seed_override: Option<u64>,
        /// Output directory; overrides `out` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List the available suites.
    Suites,
}

fn main() -> ExitCode {
    let args = Args::parse();
    match args.command {
        Command::Suites => {
            for s in SUITES {
                println!("{s}");
            }
            ExitCode::SUCCESS
        }
        Command::Run { config, workers, seed_override, out } => {
            let cfg = match ExperimentConfig::load(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("{e}");
                    return ExitCode::from(2);
                }
            };
            let workers = workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let opts = RunOptions { workers, seed_override, out, seed_env: std::env::var(SEED_ENV).ok() };
            match execute(cfg, &opts) {
                Ok(outcome) => {
                    for (suite, ok) in &outcome.suite_verdicts {
                        println!("{suite}: {}", if *ok { "pass" } else { "FAIL" });
                    }
                    println!("artifacts in {}", outcome.out_dir.display());
                    if outcome.passed {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::FAILURE
                    }
                }
                Err(e @ Error::Config(_)) => {
                    eprintln!("{e}");
                    ExitCode::from(2)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::FAILURE
                }
            }
        }
    }
}
