//! Offline driver for the P300 classification pipeline:
//! simulate | fit | evaluate | grid | version.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "sirtgp",
    version,
    about = "Bayesian time-varying P300 decoding with channel-interaction effects"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a calibration/test session pair from a [simulate] config.
    Simulate {
        /// Run configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Output directory for sessions, truth mask, and manifest.
        #[arg(long)]
        out_dir: PathBuf,
        /// Override the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit the model on a labeled session and write the posterior draws.
    Fit {
        #[arg(long)]
        config: PathBuf,
        /// Labeled calibration session container.
        #[arg(long)]
        session: PathBuf,
        /// Output draws file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a test session from persisted draws and write CSV reports.
    Evaluate {
        /// Optional config carrying an [evaluate] section.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        draws: PathBuf,
        #[arg(long)]
        session: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Sweep generator settings x replicates x methods.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the version.
    Version,
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate {
            config,
            out_dir,
            seed,
        } => commands::cmd_simulate(config, out_dir, *seed),
        Command::Fit {
            config,
            session,
            out,
            seed,
        } => commands::cmd_fit(config, session, out, *seed),
        Command::Evaluate {
            config,
            draws,
            session,
            out_dir,
        } => commands::cmd_evaluate(config.as_deref(), draws, session, out_dir),
        Command::Grid {
            config,
            out_dir,
            seed,
        } => commands::cmd_grid(config, out_dir, *seed),
        Command::Version => {
            println!("sirtgp {}", env!("CARGO_PKG_VERSION"));
            Ok(())
        }
    };
    if let Err(e) = result {
        eprintln!("error: {}", e.message);
        std::process::exit(e.code);
    }
}
