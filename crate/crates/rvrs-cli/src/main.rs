//! Command-line entry point: `rvrs <experiment> --config <file>`.
//!
//! All substance lives in `rvrs::experiments`; this binary only parses
//! arguments, loads the config file, and prints where the artifacts went.

use clap::Parser;
use rvrs::config::Config;
use rvrs::experiments::{resolve_context, run, Experiment};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "rvrs",
    about = "Rejection-sculpted variational inference experiments",
    version
)]
struct Cli {
    /// Experiment to run: funnel, gradvar, sweep-z, logreg, semi,
    /// bound-check, or eval.
    experiment: String,

    /// Flat key-value config file (`key = value` lines).
    #[arg(long)]
    config: PathBuf,

    /// Seed override; takes precedence over a `seed` key in the config.
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory override; takes precedence over `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Worker threads for grid-parallel sections.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run_cli(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run_cli(cli: Cli) -> rvrs::error::Result<()> {
    let experiment = Experiment::parse(&cli.experiment)?;
    let mut cfg = Config::load(&cli.config)?;
    let ctx = resolve_context(&mut cfg, experiment, cli.seed, cli.out, cli.workers)?;
    let summary = run(experiment, cfg, &ctx)?;
    println!(
        "{} finished in {:.2}s; artifacts in {}",
        experiment.name(),
        summary.wall_time_seconds,
        ctx.out_dir.display()
    );
    for (name, value) in &summary.metrics {
        println!("  {name} = {value}");
    }
    Ok(())
}
