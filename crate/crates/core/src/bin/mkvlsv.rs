use std::path::PathBuf;
use std::process;

use clap::{Parser, Subcommand};
use mkvlsv::cli::{exit_code, run, Command};

#[derive(Parser)]
#[command(name = "mkvlsv", version, about = "Particle engine for calibrated local stochastic volatility")]
struct Args {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(clap::Args)]
struct Io {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate the interacting particle system and write snapshots.
    Simulate(Io),
    /// Build a local volatility surface from call prices.
    Dupire(Io),
    /// Reprice vanilla calls from a simulated terminal law.
    CalibrationCheck(Io),
    /// Propagation-of-chaos convergence study.
    ChaosStudy(Io),
    /// Compare particle estimates against the Fokker-Planck solver.
    FpOracle(Io),
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    let (command, io) = match args.command {
        Cmd::Simulate(io) => (Command::Simulate, io),
        Cmd::Dupire(io) => (Command::Dupire, io),
        Cmd::CalibrationCheck(io) => (Command::CalibrationCheck, io),
        Cmd::ChaosStudy(io) => (Command::ChaosStudy, io),
        Cmd::FpOracle(io) => (Command::FpOracle, io),
    };
    match run(command, &io.config, &io.out_dir) {
        Ok(manifest) => {
            log::info!("{} finished in {:.2}s", manifest.command, manifest.metadata.wall_seconds);
            println!("{}", io.out_dir.join("manifest.json").display());
        }
        Err(err) => {
            eprintln!("error: {err}");
            process::exit(exit_code(&err));
        }
    }
}
