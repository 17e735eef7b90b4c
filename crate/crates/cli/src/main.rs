//! Command-line entry point for norm-game peer-effects workflows.
//!
//! Subcommands: `mc` (Monte Carlo tables), `instruments` (build instrument
//! CSVs + first-stage diagnostics from data files), `estimate` (profile-IV
//! comparison of the one-step and geometry menus), `twostar` (the two-star
//! collapse diagnostics). Exit codes: 0 success, 1 runtime failure, 2 usage
//! error.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "normgeo", version, about = "Peer-effects norm games: simulation, geometry instruments, IV/GMM")]
struct Cli {
    /// Worker threads for data-parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the Monte Carlo harness and write table1/table2/report files.
    Mc(McArgs),
    /// Build instrument signatures from edge/node CSV files.
    Instruments(InstrumentsArgs),
    /// Profile-IV estimation comparing the one-step and geometry menus.
    Estimate(EstimateArgs),
    /// Build the two-star fixture and check the one-step collapse.
    Twostar(TwostarArgs),
}

#[derive(Args)]
struct McArgs {
    /// TOML or JSON config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set beta_fix=1.2 --set n=600`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "mc_out")]
    out: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct CommonDataArgs {
    /// Edge CSV (`group,src,dst,weight`).
    #[arg(long)]
    edges: PathBuf,
    /// Node CSV (`group,node,<x...>[,y][,cluster]`).
    #[arg(long)]
    nodes: PathBuf,
    /// Treat edges as undirected (symmetrize before normalization).
    #[arg(long)]
    undirected: bool,
    /// Aggregator family.
    #[arg(long, value_parser = ["lim", "ces", "smoothmax", "quantile"])]
    family: String,
    /// CES curvature β.
    #[arg(long)]
    beta: Option<f64>,
    /// Smooth-max attention κ.
    #[arg(long)]
    kappa: Option<f64>,
    /// Quantile level q.
    #[arg(long)]
    q: Option<f64>,
    /// CES positivity shift; "auto" picks max(0, 1 − min(actions)).
    #[arg(long, default_value = "auto")]
    shift: String,
    /// Predictor for ŷ.
    #[arg(long, default_value = "crossfit", value_parser = ["oracle", "ols", "crossfit"])]
    predictor: String,
    /// Oracle predictor coefficients, comma-separated (one per x column).
    #[arg(long)]
    oracle_gamma: Option<String>,
    /// Cross-fitting folds.
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Multi-step depth K.
    #[arg(long, default_value_t = 3)]
    steps: usize,
    /// Shell depth H.
    #[arg(long, default_value_t = 4)]
    shells: usize,
    /// Friction floor ε₀.
    #[arg(long, default_value_t = 1e-8)]
    epsilon0: f64,
    /// Seed for fold assignment and any other randomness.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct InstrumentsArgs {
    #[command(flatten)]
    data: CommonDataArgs,
    /// Which menu to emit.
    #[arg(long, default_value = "geo", value_parser = ["bruz", "geo", "geo-full"])]
    menu: String,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    data: CommonDataArgs,
    /// θ grid, comma-separated (ignored for LIM).
    #[arg(long)]
    grid: Option<String>,
    /// Geometry menu used for the GEO column.
    #[arg(long, default_value = "geo", value_parser = ["geo", "geo-full"])]
    geo_menu: String,
    /// Output CSV path (a JSON trace is written alongside).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TwostarArgs {
    /// Peripherals on hub A.
    #[arg(long, default_value_t = 5)]
    size_a: usize,
    /// Peripherals on hub B.
    #[arg(long, default_value_t = 5)]
    size_b: usize,
    /// Give the hubs different covariates (breaks the collapse).
    #[arg(long)]
    unequal_hubs: bool,
    /// CES curvature for the diagnostics.
    #[arg(long, default_value_t = 1.2)]
    beta: f64,
    /// Machine-readable output.
    #[arg(long)]
    json: bool,
}

/// Error that distinguishes usage problems (exit 2) from runtime failures
/// (exit 1).
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if threads == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        normgeo::par::configure_threads(threads);
    }
    let result = match cli.command {
        Command::Mc(args) => commands::mc::run(args),
        Command::Instruments(args) => commands::instruments::run(args),
        Command::Estimate(args) => commands::estimate::run(args),
        Command::Twostar(args) => commands::twostar::run(args),
    };
    match result {
        Ok(code) => code,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
