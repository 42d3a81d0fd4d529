//! `ccnn`: run convexified-CNN experiments from a TOML config.
//!
//! Exit status is 0 on success, 2 for configuration or input errors and 3
//! for failures while computing. Errors are printed on stderr as JSON
//! `{"stage", "kind", "message"}`.

mod commands;
mod config;
mod error;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};

use commands::{Artifacts, Context};
use config::ExperimentConfig;
use error::{CliError, EXIT_USAGE};

type Runner = fn(&Context) -> Result<Artifacts, CliError>;

#[derive(Parser)]
#[command(name = "ccnn", version, about = "Convexified CNNs with bootstrap prediction intervals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one model; writes params.ccna, trace.csv and fit.json.
    Train(Args),
    /// Warm-start bootstrap; writes the prediction cube, interval CSV,
    /// per-sample histograms and summary.json.
    Bootstrap(Args),
    /// Export last-convolution features of a weight bundle.
    Extract(Args),
    /// Add calibrated noise to a weight bundle until it reaches chance level.
    Perturb(Args),
    /// Compare bootstrap and sampling distributions over a grid of sizes.
    Consistency(Args),
}

#[derive(clap::Args)]
struct Args {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let (name, args, run): (&str, &Args, Runner) = match &cli.command {
        Command::Train(a) => ("train", a, commands::train),
        Command::Bootstrap(a) => ("bootstrap", a, commands::bootstrap),
        Command::Extract(a) => ("extract", a, commands::extract),
        Command::Perturb(a) => ("perturb", a, commands::perturb),
        Command::Consistency(a) => ("consistency", a, commands::consistency),
    };
    match execute(name, &args.config, run) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::to_string(&e).expect("error report serializes"));
            ExitCode::from(e.exit_code as u8)
        }
    }
}

fn execute(name: &str, config: &Path, run: Runner) -> Result<(), CliError> {
    let (cfg, base) = ExperimentConfig::load(config)?;
    let ctx = Context::new(cfg, base);
    let started = unix_now();
    let clock = Instant::now();
    let result = run(&ctx);
    // timestamps live only here so the artifacts stay byte-identical
    if ctx.out.is_dir() {
        let mut log = format!("command={name}\nconfig={}\nstarted_unix={started}\n", config.display());
        let _ = writeln!(log, "finished_unix={}\nelapsed_seconds={:.3}", unix_now(), clock.elapsed().as_secs_f64());
        match &result {
            Ok(artifacts) => {
                log.push_str("status=ok\n");
                for a in artifacts {
                    let _ = writeln!(log, "artifact={}", a.display());
                }
            }
            Err(e) => {
                let _ = writeln!(log, "status=error\nkind={}\nmessage={}", e.kind, e.message);
            }
        }
        let _ = std::fs::write(ctx.out.join("run.log"), log);
    }
    result.map(|_| ())
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}
