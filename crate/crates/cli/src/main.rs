use anyhow::Result;
use clap::{Parser, Subcommand};
use sdecv_cli::config::ExperimentConfig;
use sdecv_cli::runner;
use std::path::PathBuf;
use std::process::ExitCode;

/// Monte Carlo option pricing with neural control variates.
#[derive(Parser)]
#[command(name = "sdecv", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Override the training/estimation seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the Monte Carlo tolerance.
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Report configuration problems without running.
    Validate { config: PathBuf },
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::FAILURE
        }
    }
}

fn run() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            seed,
            out,
            tol,
        } => {
            let mut cfg = ExperimentConfig::from_path(&config)?;
            if let Some(s) = seed {
                cfg.training.seed = s;
            }
            if let Some(t) = tol {
                cfg.estimation.tolerance = t;
            }
            let out_dir = out.unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
            let csv = runner::run_experiment(&cfg, &out_dir)?;
            println!("results written to {}", csv.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate { config } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let issues = cfg.diagnostics();
            if issues.is_empty() {
                println!("ok");
                Ok(ExitCode::SUCCESS)
            } else {
                for issue in &issues {
                    println!("{}", issue);
                }
                Ok(ExitCode::FAILURE)
            }
        }
    }
}
