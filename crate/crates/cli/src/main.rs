use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use puridiver::harness::{
    generate_synthetic_full, run_to_dir, sweep_alpha_to_dir, write_dataset_csv, ExperimentConfig, SyntheticSpec,
};
use puridiver::{Error, Result};

#[derive(Parser)]
#[command(name = "puridiver", version, about = "Online continual learning with noisy labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration over its seeds.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Replaces the configured seed list with a single seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one configuration per static alpha value.
    SweepAlpha {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.5,0.6,1.0")]
        alphas: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic dataset to CSV.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load(config: &PathBuf, seed: Option<u64>, out: Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    if let Some(dir) = out {
        cfg.output_dir = dir;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let cfg = load(&config, seed, out)?;
            let records = run_to_dir(&cfg, &cfg.output_dir)?;
            if let Some(last) = records.iter().map(|r| r.task).max() {
                for r in records.iter().filter(|r| r.task == last) {
                    println!(
                        "{} accuracy={:.4} purity={:.4} diversity={:.4}",
                        r.run_id, r.accuracy, r.purity, r.diversity
                    );
                }
            }
        }
        Command::SweepAlpha { config, alphas, out } => {
            let cfg = load(&config, None, out)?;
            let rows = sweep_alpha_to_dir(&cfg, &alphas, &cfg.output_dir)?;
            for r in rows {
                println!(
                    "alpha={} accuracy={:.4} purity={:.4} diversity={:.4}",
                    r.alpha, r.summary.accuracy, r.summary.purity, r.summary.diversity
                );
            }
        }
        Command::GenData { spec, out, seed } => {
            let spec = SyntheticSpec::load(&spec)?;
            let data = generate_synthetic_full(&spec, seed)?;
            write_dataset_csv(&data, &out)?;
            println!("wrote {} examples to {}", data.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code() as u8
}
