//! `mktcomplete`: command-line driver for the portfolio experiments.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure,
//! 4 I/O failure.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod output;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use config::{Config, Format};
use output::Manifest;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numerical(String),
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Io(m) => write!(f, "i/o failure: {m}"),
        }
    }
}

impl From<mktcomplete::Error> for CliError {
    fn from(e: mktcomplete::Error) -> Self {
        if e.is_invalid_input() {
            CliError::Config(e.to_string())
        } else {
            CliError::Numerical(e.to_string())
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mktcomplete", version, about = "Dynamic portfolio choice with derivatives under Heston")]
struct Cli {
    /// TOML experiment configuration; omitted fields take the default calibration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `simulation.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Result file; a `<out>.manifest.json` is written next to it.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Price the configured instruments at the initial state.
    Price,
    /// Simulate the outer paths.
    Simulate,
    /// Optimal allocation at t = 0 by PAMC.
    Pamc,
    /// l1 norm of [stock, candidate] weights across strikes.
    SweepMoneyness,
    /// Best candidate of each kind across maturities.
    SweepMaturity,
    /// Variance sensitivity of strangles across maturities.
    VegaProfile,
    /// Randomised check that two instruments attain the minimal l1 norm.
    VerifyProp1,
    /// Indirect, direct and closed-form allocations across risk aversions.
    CompareMethods,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Price => "price",
            Command::Simulate => "simulate",
            Command::Pamc => "pamc",
            Command::SweepMoneyness => "sweep-moneyness",
            Command::SweepMaturity => "sweep-maturity",
            Command::VegaProfile => "vega-profile",
            Command::VerifyProp1 => "verify-prop1",
            Command::CompareMethods => "compare-methods",
        }
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let start = Instant::now();
    let mut cfg = Config::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.simulation.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output.path = Some(out.display().to_string());
    }
    if let Some(f) = cli.format {
        cfg.output.format = f;
    }
    cfg.resolve();
    cfg.validate()?;

    let outcome = match cli.command {
        Command::Price => run::price(&cfg),
        Command::Simulate => run::simulate(&cfg),
        Command::Pamc => run::pamc(&cfg),
        Command::SweepMoneyness => run::sweep_moneyness_cmd(&cfg),
        Command::SweepMaturity => run::sweep_maturity_cmd(&cfg),
        Command::VegaProfile => run::vega(&cfg),
        Command::VerifyProp1 => run::prop1(&cfg),
        Command::CompareMethods => run::compare(&cfg),
    }
    .map_err(|e| match e {
        CliError::Numerical(m) => CliError::Numerical(format!("{}: {m}", cli.command.name())),
        other => other,
    })?;

    let body = outcome.table.render(cfg.output.format)?;
    let manifest = Manifest {
        experiment: cli.command.name(),
        library_version: env!("CARGO_PKG_VERSION"),
        seed: cfg.simulation.seed,
        format: cfg.output.format,
        output: cfg.output.path.clone(),
        wall_time_seconds: start.elapsed().as_secs_f64(),
        timings: outcome.timings,
        config: &cfg,
    };
    let out = cfg.output.path.as_ref().map(PathBuf::from);
    output::emit(out.as_deref(), &body, &manifest)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mktcomplete: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
