use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use saber_cli::commands;
use saber_cli::io::{read_config, CliResult};

/// Adaptive-bandwidth regression experiments.
#[derive(Parser)]
#[command(name = "saber", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON config; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Mixture vs. local linear smoothing on 30 toy datasets.
    Comparison(Common),
    /// Bandwidth ratios against noise and density references.
    Proportionality(Common),
    /// Sample, fit, propose and resample on a 2-d field.
    ActiveLoop(Common),
    /// Train a model from a dataset CSV and save it as JSON.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Validation CSV; by default a random share of the data is held out.
        #[arg(long)]
        validation: Option<PathBuf>,
    },
    /// Predict at the inputs of a CSV with a saved model.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Local function complexity at the inputs of a CSV.
    Lfc {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Comparison(c) => commands::comparison(read_config(c.config.as_deref())?, c.seed, &c.out),
        Command::Proportionality(c) => commands::proportionality(read_config(c.config.as_deref())?, c.seed, &c.out),
        Command::ActiveLoop(c) => commands::active_loop(read_config(c.config.as_deref())?, c.seed, &c.out),
        Command::Fit { common, data, validation } => commands::fit(
            read_config(common.config.as_deref())?,
            common.seed,
            &data,
            validation.as_deref(),
            &common.out,
        ),
        Command::Predict { common, model, input } => commands::predict(&model, &input, &common.out),
        Command::Lfc { common, model, input } => commands::lfc(&model, &input, &common.out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = std::env::var("SABER_THREADS").ok().and_then(|s| s.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("could not cap threads: {e}");
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
