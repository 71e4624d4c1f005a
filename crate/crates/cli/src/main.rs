//! `mixcvar` command-line interface.
//!
//! Subcommands: `fit`, `risk`, `optimize`, `bl`, `backtest`, `simulate`.
//! Settings resolve as flags, then `--config` file, then defaults; the
//! output directory may also come from `MIXCVAR_OUT_DIR`.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use mixcvar::backtest::MarketSource;

use commands::{Method, Pipeline, Study};
use config::{Overrides, RunConfig, OUT_DIR_ENV};

#[derive(Parser)]
#[command(name = "mixcvar", version, about = "CVaR portfolios under Gaussian-mixture return models")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Tail probability (default 0.01).
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Seed for every stochastic step (default 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for output files (default `.`).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Projected-gradient stopping tolerance.
    #[arg(long, global = true)]
    grad_tolerance: Option<f64>,
    /// Projected-gradient iteration cap.
    #[arg(long, global = true)]
    max_iters: Option<usize>,
    /// EM random starts.
    #[arg(long, global = true)]
    em_restarts: Option<usize>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a Gaussian mixture to a returns CSV and save the model.
    Fit {
        #[arg(long)]
        returns: PathBuf,
        #[arg(long, default_value_t = 2)]
        components: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// VaR, CVaR and their bounds for one portfolio.
    Risk {
        #[arg(long)]
        model: PathBuf,
        /// CSV with `asset,weight` rows.
        #[arg(long, conflicts_with = "equal")]
        weights: Option<PathBuf>,
        /// Use equal weights (the default when no weights are given).
        #[arg(long)]
        equal: bool,
        /// Also write the table as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Minimize a risk measure over long-only portfolios.
    Optimize {
        #[arg(long, conflicts_with = "returns")]
        model: Option<PathBuf>,
        #[arg(long)]
        returns: Option<PathBuf>,
        #[arg(long, value_enum)]
        method: Method,
        /// Minimum expected return.
        #[arg(long)]
        floor: Option<f64>,
        /// Mixture components when fitting `--returns`.
        #[arg(long)]
        components: Option<usize>,
        /// Portfolio CSV (default `<out-dir>/portfolio.csv`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Blend estimated means with market equilibrium and re-optimize.
    Bl {
        #[arg(long, conflicts_with = "returns")]
        model: Option<PathBuf>,
        #[arg(long)]
        returns: Option<PathBuf>,
        /// Caps CSV for `--market last|average`.
        #[arg(long)]
        caps: Option<PathBuf>,
        /// `last`, `average`, `equal` or a weights CSV.
        #[arg(long, default_value = "average")]
        market: String,
        #[arg(long)]
        tau: f64,
        #[arg(long, value_enum, default_value = "mixture")]
        pipeline: Pipeline,
        #[arg(long)]
        components: Option<usize>,
    },
    /// Rolling-window backtest of the strategies.
    Backtest {
        #[arg(long)]
        returns: PathBuf,
        #[arg(long)]
        caps: PathBuf,
        /// Window length (default 180).
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long, default_value = "LstM,AvgM,StDev,CVaR_N,CVaR_M")]
        strategies: String,
        /// BL confidences for CVaR_N and CVaR_M, e.g. `1/16,1/4,1,4`; `none` disables.
        #[arg(long)]
        taus: Option<String>,
        /// Market portfolio for BL: `last` or `average`.
        #[arg(long)]
        market_source: Option<MarketSource>,
        /// Expected-return floor: a level, `market` or `k*market`.
        #[arg(long)]
        floor: Option<String>,
        /// First evaluation row (0-based; default the window length).
        #[arg(long)]
        start: Option<usize>,
        #[arg(long)]
        components: Option<usize>,
    },
    /// Studies on a known model: population statistics or replications.
    Simulate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "true-dist")]
        study: Study,
        #[arg(long, default_value_t = 10_000)]
        reps: usize,
        #[arg(long, default_value_t = 180)]
        train: usize,
        #[arg(long, default_value = "LstM,StDev,CVaR_N,CVaR_M")]
        strategies: String,
        #[arg(long)]
        taus: Option<String>,
        /// Expected-return floor: a level, `market` or `k*market`.
        #[arg(long)]
        floor: Option<String>,
    },
}

fn parse_taus(text: Option<&str>) -> Result<Option<Vec<f64>>> {
    match text {
        None => Ok(None),
        Some("none") => Ok(Some(Vec::new())),
        Some(t) => Ok(Some(config::parse_list(t)?)),
    }
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let mut flags = Overrides {
        alpha: g.alpha,
        seed: g.seed,
        out_dir: g.out_dir.clone(),
        grad_tolerance: g.grad_tolerance,
        max_iters: g.max_iters,
        em_restarts: g.em_restarts,
        ..Overrides::default()
    };
    match &cli.command {
        Command::Optimize { components, .. } | Command::Bl { components, .. } => flags.em_components = *components,
        Command::Backtest { horizon, taus, market_source, components, .. } => {
            flags.horizon = *horizon;
            flags.taus = parse_taus(taus.as_deref())?;
            flags.market_source = *market_source;
            flags.em_components = *components;
        }
        Command::Simulate { taus, .. } => flags.taus = parse_taus(taus.as_deref())?,
        _ => {}
    }
    let env_out = std::env::var_os(OUT_DIR_ENV).map(PathBuf::from);
    let cfg = RunConfig::resolve(&flags, g.config.as_deref(), env_out)?;
    match &cli.command {
        Command::Fit { returns, components, out } => commands::fit(returns, *components, out, &cfg),
        Command::Risk { model, weights, out, .. } => commands::risk(model, weights.as_deref(), out.as_deref(), &cfg),
        Command::Optimize { model, returns, method, floor, out, .. } => commands::optimize(
            &commands::OptimizeArgs {
                model: model.as_deref(),
                returns: returns.as_deref(),
                method: *method,
                floor: *floor,
                out: out.as_deref(),
            },
            &cfg,
        ),
        Command::Bl { model, returns, caps, market, tau, pipeline, .. } => commands::bl(
            &commands::BlArgs {
                model: model.as_deref(),
                returns: returns.as_deref(),
                caps: caps.as_deref(),
                market,
                tau: *tau,
                pipeline: *pipeline,
            },
            &cfg,
        ),
        Command::Backtest { returns, caps, strategies, floor, start, .. } => {
            let kinds = commands::parse_strategies(strategies)?;
            let floor = floor.as_deref().map(commands::parse_floor).transpose()?;
            commands::backtest(&commands::BacktestArgs { returns, caps, strategies: &kinds, floor, start: *start }, &cfg)
        }
        Command::Simulate { model, study, reps, train, strategies, floor, .. } => {
            let kinds = commands::parse_strategies(strategies)?;
            let floor = floor.as_deref().map(commands::parse_floor).transpose()?;
            commands::simulate(
                &commands::SimulateArgs { model, study: *study, reps: *reps, train: *train, strategies: &kinds, floor },
                &cfg,
            )
            .map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
