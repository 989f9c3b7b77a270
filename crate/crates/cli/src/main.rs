//! `graphpl`: run a federated patchwork-learning experiment from a config
//! file, with flag overrides. Exit codes: 0 success, 1 usage error, 2
//! runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use graphpl_cli::config::{ExperimentConfig, Method};
use graphpl_cli::runner;

#[derive(Debug, Parser)]
#[command(name = "graphpl", version, about = "Federated multi-modal patchwork learning simulator")]
struct Cli {
    /// Config file (TOML); defaults apply for every missing key
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config file)
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config file)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fusion method (overrides the config file)
    #[arg(long, value_enum)]
    method: Option<Method>,
    /// Global federation rounds (overrides the config file)
    #[arg(long)]
    rounds: Option<usize>,
    /// Worker threads for client rounds (overrides the config file)
    #[arg(long)]
    workers: Option<usize>,
}

fn load_config(cli: &Cli) -> graphpl_core::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::parse_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.display().to_string();
    }
    if let Some(method) = cli.method {
        cfg.method = method;
    }
    if let Some(rounds) = cli.rounds {
        cfg.train.global_rounds = rounds;
    }
    if let Some(workers) = cli.workers {
        cfg.workers = workers;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    // config problems are usage errors (exit 1); everything after is runtime
    let cfg = match load_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match runner::run(&cfg) {
        Ok(artifacts) => {
            println!(
                "run complete: out={} checksum={:016x}",
                artifacts.out_dir.display(),
                artifacts.global_checksum
            );
            if let Some(gq) = artifacts.final_gq {
                println!("final gq: {gq:.4}");
            }
            if let Some(rq) = &artifacts.final_rq {
                println!("final rq mean: {:.4}", rq.mean);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
