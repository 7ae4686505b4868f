//! `dxf`: run the forecasting pipeline stages from a TOML config.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dxf_core::pipeline::{report, BalanceMode, Run, RunConfig};
use dxf_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "dxf",
    version,
    about = "Next-visit diagnosis forecasting from longitudinal visits"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run config (TOML). Defaults apply to every missing field.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for fold-level parallelism (overrides DXF_JOBS).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory (overrides DXF_OUTPUT_DIR).
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Dataset variant (overrides `balance` in the config).
    #[arg(long, global = true, value_enum)]
    balance: Option<Balance>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Balance {
    Raw,
    Balanced,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Load or generate the cohort and write it as CSV.
    Synth,
    /// Clean, normalize and impute the cohort.
    Preprocess,
    /// Write the sequence manifest, fold assignment and group counts.
    Sequences,
    /// Train every configured model on every fold and save checkpoints.
    Train,
    /// Evaluate saved checkpoints and the stability baseline.
    Evaluate,
    /// Retrain under each ablation spec and report BCA change.
    Ablate,
    /// Collate outputs into table- and figure-shaped CSVs.
    Report,
}

fn config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env(|k| std::env::var(k).ok())?;
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(Error::config("--jobs", "must be at least 1"));
        }
        cfg.jobs = j;
    }
    if let Some(d) = &cli.output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(b) = cli.balance {
        cfg.balance = match b {
            Balance::Raw => BalanceMode::Raw,
            Balance::Balanced => BalanceMode::Balanced,
        };
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    let run = Run::new(config(cli)?)?;
    std::fs::create_dir_all(&run.cfg.output_dir)?;
    match cli.command {
        Command::Synth => run.synth(),
        Command::Preprocess => run.preprocess(),
        Command::Sequences => run.sequences(),
        Command::Train => run.train(),
        Command::Evaluate => run.evaluate(),
        Command::Ablate => run.ablate(),
        Command::Report => report(&run),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
