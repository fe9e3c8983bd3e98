//! `latode`: generate data, train, evaluate, predict and serve.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 runtime
//! failure.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "latode", version, about = "Latent ODE engine for irregularly sampled time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cohort (spirals or ICU) as train/test JSON files.
    GenData {
        /// TOML generator configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a configuration key, e.g. `--set icu.n_patients=100`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a model and write the best-validation checkpoint.
    Train {
        /// TOML training configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Training series (JSON documents or CSV).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Reconstruction error per fraction, accuracy and AUC on a test set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also fit the summary-statistics logistic baseline on this set.
        #[arg(long)]
        baseline_train: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Ensemble export for one series.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        series_id: String,
        /// TOML ensemble options (K, horizon, thresholds, tolerances).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run the HTTP API.
    Serve {
        #[arg(long, env = "LATODE_CHECKPOINT")]
        checkpoint: PathBuf,
        /// TOML server configuration.
        #[arg(long, env = "LATODE_SERVER_CONFIG")]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, env = "LATODE_HOST", default_value = "127.0.0.1")]
        host: String,
        #[arg(long, env = "LATODE_PORT")]
        port: Option<u16>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    tracing_subscriber::fmt().with_writer(std::io::stderr).with_target(false).init();
    let result = match cli.command {
        Command::GenData { config, overrides, out_dir } => commands::gen_data(config, &overrides, &out_dir),
        Command::Train { config, overrides, data, out_dir } => commands::train(config, &overrides, &data, &out_dir),
        Command::Eval { checkpoint, data, baseline_train, out_dir } => {
            commands::eval(&checkpoint, &data, baseline_train.as_deref(), &out_dir)
        }
        Command::Predict { checkpoint, data, series_id, config, overrides, fraction, seed, out_dir } => {
            commands::predict(&checkpoint, &data, &series_id, config, &overrides, fraction, seed, &out_dir)
        }
        Command::Serve { checkpoint, config, overrides, host, port } => {
            commands::serve(&checkpoint, config, &overrides, &host, port)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code())
        }
    }
}
