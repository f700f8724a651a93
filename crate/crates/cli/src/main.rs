use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vegcast_core::config::Config;
use vegcast_core::pipeline::{run, Task};
use vegcast_core::Error;

/// Two-phase gridded vegetation-index forecasting.
#[derive(Debug, Parser)]
#[command(name = "vegcast", version)]
struct Cli {
    /// Pipeline configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for grid subsampling; overrides `[run] seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Align long-format CSV inputs onto one grid and export the store.
    Ingest {
        /// Input files; override `[data] inputs`.
        inputs: Vec<PathBuf>,
    },
    /// Rank precipitation and VPD month windows.
    SelectFeatures,
    /// Cross-validate model parameters for every split.
    Estimate,
    /// Forecast the covariates one year ahead.
    ForecastCovariates,
    /// Forecast the vegetation index with every configured method.
    ForecastNdvi,
    /// Forecast and write the report, gross totals and heatmaps.
    Evaluate,
    /// Run every stage.
    Pipeline,
}

fn execute(cli: Cli) -> Result<Vec<PathBuf>, Error> {
    let mut config = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let task = match cli.command {
        Command::Ingest { inputs } => {
            if !inputs.is_empty() {
                config.data.inputs = inputs;
                config.data.store = None;
            }
            Task::Ingest
        }
        Command::SelectFeatures => Task::SelectFeatures,
        Command::Estimate => Task::Estimate,
        Command::ForecastCovariates => Task::ForecastCovariates,
        Command::ForecastNdvi => Task::ForecastNdvi,
        Command::Evaluate => Task::Evaluate,
        Command::Pipeline => Task::Pipeline,
    };
    run(&config, task, &cli.out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
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
