//! Command-line entry point: training runs, checkpoint evaluation, the
//! brute-force variance lab, alpha ablations, and report assembly.

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "alsr",
    version,
    about = "EDM diffusion training laboratory with adaptive log-SNR reweighting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and write its artifacts into the output directory.
    Train {
        /// Run configuration file (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Output directory; created if missing, only written under.
        #[arg(long)]
        out: PathBuf,
        /// Override the config file's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate from a checkpoint and score it against fresh reference data.
    Eval {
        /// Model checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run configuration file (TOML).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify variance-optimal importance sampling on a discrete population.
    VarianceLab {
        /// Population spec file (TOML): lambdas, base_prob, cond_mean, cond_var.
        #[arg(long)]
        population: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Simplex lattice resolution; defaults by grid size.
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Run the alpha/kernel/seed sweep and write the aggregated table.
    Ablate {
        /// Base run configuration file (TOML).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated reweighting strengths.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.01, 0.05, 0.1])]
        alphas: Vec<f64>,
        /// Comma-separated kernels (rational, exponential).
        #[arg(long, value_delimiter = ',', default_values = ["rational"])]
        kernels: Vec<String>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0u64, 1, 2])]
        seeds: Vec<u64>,
    },
    /// Merge finished run directories into one comparison report.
    Report {
        /// Run directories written by `train` or `ablate`.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train { config, out, seed } => commands::train(&config, &out, seed),
        Command::Eval {
            checkpoint,
            config,
            out,
        } => commands::eval(&checkpoint, &config, &out),
        Command::VarianceLab {
            population,
            out,
            resolution,
        } => commands::variance_lab(&population, &out, resolution),
        Command::Ablate {
            config,
            out,
            alphas,
            kernels,
            seeds,
        } => commands::ablate(&config, &out, &alphas, &kernels, &seeds),
        Command::Report { runs, out } => report::assemble(&runs, &out),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
