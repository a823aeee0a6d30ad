use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use heraldkey_cli::commands;
use heraldkey_cli::config::{Overrides, ProfileName, Resolved, RunConfig};
use heraldkey_cli::record::{to_json, write_atomic};
use heraldkey_cli::CliError;

/// Heralded device-independent QKD key rates from Gaussian optics.
#[derive(Parser)]
#[command(name = "heraldkey", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(short, long)]
    config: PathBuf,
    /// Overrides the profile named in the config.
    #[arg(long, value_enum)]
    profile: Option<ProfileName>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Parallel sweep points.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Key rate at one point, optimizing whatever the config marks as free.
    Keyrate(Common),
    /// Key rate along the configured axis, written as CSV.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Reuse points from a matching checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Smallest efficiency with a positive optimized key rate.
    Threshold(Common),
    /// Gaussian behavior table next to the truncated-Fock one.
    Oracle {
        #[command(flatten)]
        common: Common,
        /// Photon-number cutoff per mode.
        #[arg(long)]
        cutoff: Option<usize>,
    },
    /// Entropy SDPs of the configured point in SDPA sparse format.
    ExportSdp(Common),
}

fn resolve(common: &Common) -> Result<Resolved, CliError> {
    let overrides = Overrides {
        profile: common.profile,
        seed: common.seed,
        workers: common.workers,
        output_dir: common.out.clone(),
    };
    RunConfig::load(&common.config)?.resolve(&overrides)
}

fn write_report(resolved: &Resolved, name: &str, json: &str) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(&resolved.output_dir)?;
    let path = resolved.output_dir.join(name);
    write_atomic(&path, json.as_bytes())?;
    Ok(path)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Keyrate(common) => {
            let resolved = resolve(&common)?;
            let report = commands::keyrate(&resolved)?;
            println!("{}", report.summary());
            let path = write_report(&resolved, "keyrate.json", &to_json(&report))?;
            println!("wrote {}", path.display());
            if report.key_rate.is_none() {
                return Err(CliError::Numerical(report.summary()));
            }
        }
        Command::Sweep { common, resume } => {
            let resolved = resolve(&common)?;
            let outcome = commands::sweep(&resolved, resume, None)?;
            for r in &outcome.records {
                match r.key_rate {
                    Some(k) => println!("{} = {:<10} K = {:.6e}", r.axis, r.value, k),
                    None => println!("{} = {:<10} {:?}: {}", r.axis, r.value, r.status, r.message),
                }
            }
            println!("wrote {}", outcome.csv_path.display());
            let failed = commands::failures(&outcome.records);
            if failed > 0 {
                return Err(CliError::PartialSweep {
                    failed,
                    total: outcome.records.len(),
                });
            }
        }
        Command::Threshold(common) => {
            let resolved = resolve(&common)?;
            let out = commands::threshold(&resolved)?;
            println!("{}", out.table());
            println!(
                "threshold {:.4} in [{:.4}, {:.4}] [m = {}, level = {}]",
                out.threshold, out.bracket.0, out.bracket.1, out.m, out.level
            );
            let path = write_report(&resolved, "threshold.json", &to_json(&out))?;
            println!("wrote {}", path.display());
        }
        Command::Oracle { common, cutoff } => {
            let resolved = resolve(&common)?;
            let out = commands::oracle(&resolved, cutoff)?;
            println!("{}", out.table());
            let path = write_report(&resolved, "oracle.json", &to_json(&out))?;
            println!("wrote {}", path.display());
        }
        Command::ExportSdp(common) => {
            let resolved = resolve(&common)?;
            let dir = resolved.output_dir.join("sdp");
            for p in commands::export_sdp(&resolved, &dir)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
