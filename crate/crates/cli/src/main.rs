//! `orbdist`: orbit distances, secular and full propagation, and crossing
//! forecasts driven by a TOML run file.
//!
//! Exit codes: 0 success, 1 bad input, 2 degenerate orbit configuration,
//! 3 tangent crossing, 4 no crossing within the horizon, 5 other failures.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use config::{InputError, Overrides};

#[derive(Debug, Parser)]
#[command(name = "orbdist", version, about = "Orbit distances and secular evolution across orbit crossings")]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,

    /// Run file (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Integrator tolerance for both the secular and the full model.
    #[arg(long, global = true)]
    tol: Option<f64>,

    /// Propagation horizon in years.
    #[arg(long = "horizon-years", global = true)]
    horizon_years: Option<f64>,

    /// Total width of the crossing band (au).
    #[arg(long = "band-au", global = true)]
    band_au: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand, ValueEnum)]
enum Command {
    /// Critical points of the distance between two orbits.
    Moid,
    /// Secular evolution with crossing events.
    PropagateSecular,
    /// Non-averaged N-body evolution, optionally over a phase ensemble.
    PropagateFull,
    /// Secular evolution against the ensemble mean and spread.
    Compare,
    /// Crossing-time forecasts for a family of virtual asteroids.
    CrossingTimes,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use orbdist::Error as E;
    for cause in err.chain() {
        if cause.is::<InputError>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::DegenerateConfiguration(_) => 2,
                E::TangentCrossing { .. } => 3,
                E::NoCrossings => 4,
                E::Parse(_) | E::Csv(_) | E::InvalidElements(_) | E::UnknownPlanet(_) | E::EphemerisRange { .. } => 1,
                _ => 5,
            };
        }
    }
    5
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let path = cli.config.clone().ok_or_else(|| InputError("--config <PATH> is required".into()))?;
    let ov = Overrides { out: cli.out, tol: cli.tol, horizon_years: cli.horizon_years, band_au: cli.band_au };
    let cfg = config::load(&path, &ov)?;
    let from_file = match &cfg.config.command {
        Some(name) => {
            Some(Command::from_str(name, true).map_err(|_| InputError(format!("unknown command `{name}` in config")))?)
        }
        None => None,
    };
    let command = match (cli.command, from_file) {
        (Some(c), Some(f)) if c != f => {
            return Err(InputError(format!("command line asks for {c:?} but the config names {f:?}")).into())
        }
        (Some(c), _) | (None, Some(c)) => c,
        (None, None) => return Err(InputError("no command given on the command line or in the config".into()).into()),
    };
    log::info!("running {command:?} with {}", path.display());
    match command {
        Command::Moid => commands::moid(&cfg),
        Command::PropagateSecular => commands::propagate_secular(&cfg),
        Command::PropagateFull => commands::propagate_full_cmd(&cfg),
        Command::Compare => commands::compare(&cfg),
        Command::CrossingTimes => commands::crossing_times(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // clap uses 2 for usage errors, which is taken by degenerate input.
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
