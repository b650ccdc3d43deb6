#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod error;
mod output;

use config::Loaded;
use error::CliError;

/// Privacy-preserving distributed GP regression experiments.
#[derive(Parser)]
#[command(name = "securegp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Secure average consensus on the configured initial states.
    Consensus(Common),
    /// Distributed hyperparameter optimization.
    GprTrain(Common),
    /// Secure product-of-experts prediction on the test split.
    GprPredict(Common),
    /// Empirical simulatability audit of coalition views.
    PrivacyAudit(Common),
}

#[derive(Args)]
struct Common {
    /// TOML experiment file.
    #[arg(short, long)]
    config: PathBuf,
    /// Overrides the seed in the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory in the config file.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

type Handler = fn(&Loaded, &Path) -> Result<String, CliError>;

fn run(cli: Cli) -> Result<String, CliError> {
    let (common, f): (&Common, Handler) = match &cli.command {
        Command::Consensus(c) => (c, commands::consensus),
        Command::GprTrain(c) => (c, commands::gpr_train),
        Command::GprPredict(c) => (c, commands::gpr_predict),
        Command::PrivacyAudit(c) => (c, commands::privacy_audit),
    };
    let mut loaded = Loaded::read(&common.config)?;
    if let Some(s) = common.seed {
        loaded.config.seed = s;
    }
    let out = match &common.out {
        Some(o) => o.clone(),
        None => loaded.resolve(&loaded.config.output_dir),
    };
    f(&loaded, &out)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Core(securegp::Error::ModulusTooSmall { required, .. }) = &e {
                eprintln!("q_min = {required}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
