use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use switching_mdp_cli::{run, Command, RunOptions};

#[derive(Parser)]
#[command(name = "switching-mdp", version, about = "Slow-fast regime-switching experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// Experiment config (TOML).
    #[arg(long, global = true, default_value = "experiment.toml")]
    config: PathBuf,

    /// Worker threads, 0 for one per core.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,

    /// Master seed, overriding every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory, overriding `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Invariant measure, Poisson solution and effective covariance along the averaged path.
    Analyze,
    /// One coupled path, its jumps and its deviation from the averaged path.
    Simulate,
    /// Rate functional of a path file.
    Rate,
    /// Monte Carlo tail probabilities and decay rates.
    Mc,
    /// Sampled checks of the model coefficients.
    Validate,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = match cli.command {
        Cmd::Analyze => Command::Analyze,
        Cmd::Simulate => Command::Simulate,
        Cmd::Rate => Command::Rate,
        Cmd::Mc => Command::Mc,
        Cmd::Validate => Command::Validate,
    };
    let options = RunOptions {
        workers: cli.workers,
        seed: cli.seed,
        out: cli.out,
    };
    match run(command, &cli.config, &options) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
