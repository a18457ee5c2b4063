use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adp2sgd_cli::commands;
use adp2sgd_cli::config::{parse_config, ExperimentConfig, MuSetting};
use anyhow::Context;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "adp2sgd", version, about = "Differentially private asynchronous gossip SGD simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate the noise for a privacy budget and print the feasibility table.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
        /// Sampling parameter: a number in (0, 1) or `auto` for a grid search.
        #[arg(long, value_parser = MuSetting::parse_flag)]
        mu: Option<MuSetting>,
    },
    /// Run one simulation and write its trace and report.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = ".")]
        output: PathBuf,
    },
    /// Compare two trace files; prints a CSV table.
    Compare { a: PathBuf, b: PathBuf },
    /// Run a config over consecutive seeds in parallel.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// First seed; defaults to the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 4)]
        runs: u64,
        #[arg(long, default_value = ".")]
        output: PathBuf,
    },
}

fn load(path: &Path, seed: Option<u64>) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = parse_config(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Calibrate { config, mu } => {
            let cfg = load(&config, None)?;
            let cal = commands::calibrate(&cfg, mu)?;
            print!("{}", cal.render());
            if !cal.feasible() {
                let failed = cal.failed();
                for c in &failed {
                    eprintln!("error: infeasible budget: {} violated (lhs = {}, rhs = {})", c.name, c.lhs, c.rhs);
                }
                return Ok(ExitCode::from(2));
            }
        }
        Command::Run { config, seed, output } => {
            let cfg = load(&config, seed)?;
            let outcome = commands::run(&cfg, &output)?;
            let c = &outcome.report.convergence;
            println!("trace   {}", outcome.trace_path.display());
            println!("report  {}", outcome.report_path.display());
            println!("final loss {}  final ||grad F||^2 {}", c.final_loss, c.final_grad_norm_sq);
        }
        Command::Compare { a, b } => {
            let rows = commands::compare(&a, &b)?;
            print!("{}", commands::render_comparison(&rows)?);
        }
        Command::Sweep { config, seed, runs, output } => {
            let cfg = load(&config, None)?;
            let first = seed.unwrap_or(cfg.seed);
            let seeds: Vec<u64> = (0..runs).map(|i| first + i).collect();
            let rows = commands::sweep(&cfg, &seeds, &output).context("sweep failed")?;
            print!("{}", commands::render_sweep(&rows)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ADP2_LOG_LEVEL", "error")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
