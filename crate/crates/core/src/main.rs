use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use fedsim::config::{validate, ExperimentConfig, Scenario};
use fedsim::experiment::{run, RunOptions};
use fedsim::FedError;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

/// Federated learning simulator with energy and emissions accounting.
#[derive(Debug, Parser)]
#[command(name = "fedsim", version)]
struct Cli {
    /// JSON experiment config; the bundled default is used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// fedavg-full, pfl-decoupled, lora-fl or trace-replay.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Check the config and exit.
    #[arg(long)]
    validate_only: bool,
}

fn threads_from_env() -> Result<Option<usize>, String> {
    match std::env::var("FEDSIM_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .map(Some)
            .ok_or_else(|| format!("FEDSIM_THREADS = {v:?}: must be a positive integer")),
        Err(_) => Ok(None),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(path) => match ExperimentConfig::load(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {}: {e}", path.display());
                return ExitCode::from(EXIT_CONFIG);
            }
        },
        None => ExperimentConfig::bundled_default(),
    };
    if let Some(s) = &cli.scenario {
        match Scenario::parse(s) {
            Some(sc) => cfg.scenario = Some(sc),
            None => {
                eprintln!("error: scenario = {s}: must be one of fedavg-full, pfl-decoupled, lora-fl, trace-replay");
                return ExitCode::from(EXIT_CONFIG);
            }
        }
    }
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if cli.out.is_some() {
        cfg.output_dir = cli.out.clone();
    }

    let diags = validate(&cfg);
    if !diags.is_empty() {
        for d in &diags {
            eprintln!("invalid config: {d}");
        }
        return ExitCode::from(EXIT_CONFIG);
    }
    if cli.validate_only {
        println!("config ok");
        return ExitCode::SUCCESS;
    }
    let threads = match threads_from_env() {
        Ok(t) => t,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };

    let out_dir = cfg
        .output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("fedsim-out"));
    match run(&cfg, &out_dir, &RunOptions { threads }) {
        Ok(summary) => {
            match serde_json::to_string_pretty(&summary) {
                Ok(s) => println!("{s}"),
                Err(e) => eprintln!("warning: {e}"),
            }
            eprintln!("artifacts written to {}", out_dir.display());
            ExitCode::SUCCESS
        }
        Err(e @ FedError::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
