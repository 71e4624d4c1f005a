//! Run configuration resolved from flags, an optional config file and defaults.
//!
//! Config files use the same `key = value` syntax as model files:
//!
//! ```text
//! alpha = 0.01
//! horizon = 180
//! taus = 0.0625 0.25 1 4
//! seed = 7
//! out_dir = results
//! ```

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use mixcvar::backtest::MarketSource;
use mixcvar::data::KeyValues;
use mixcvar::fit::EmConfig;
use mixcvar::optimize::SolveConfig;
use mixcvar::Probability;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "MIXCVAR_OUT_DIR";

const KNOWN_KEYS: [&str; 12] = [
    "alpha",
    "horizon",
    "taus",
    "seed",
    "grad_tolerance",
    "max_iters",
    "em_components",
    "em_restarts",
    "em_max_iters",
    "em_tolerance",
    "market_source",
    "out_dir",
];

/// Settings shared by the subcommands.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub alpha: Probability,
    pub horizon: usize,
    pub taus: Vec<f64>,
    pub seed: u64,
    pub solve: SolveConfig,
    pub em: EmConfig,
    pub market_source: MarketSource,
    pub out_dir: PathBuf,
}

/// Values given on the command line; `None` defers to the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub alpha: Option<f64>,
    pub horizon: Option<usize>,
    pub taus: Option<Vec<f64>>,
    pub seed: Option<u64>,
    pub grad_tolerance: Option<f64>,
    pub max_iters: Option<usize>,
    pub em_components: Option<usize>,
    pub em_restarts: Option<usize>,
    pub market_source: Option<MarketSource>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn resolve(flags: &Overrides, file: Option<&Path>, env_out_dir: Option<PathBuf>) -> Result<Self> {
        let kv = match file {
            Some(p) => KeyValues::read(p).with_context(|| format!("reading config {}", p.display()))?,
            None => KeyValues::default(),
        };
        if let Some(unknown) = kv.keys().find(|k| !KNOWN_KEYS.contains(k)) {
            bail!("unknown config key `{unknown}` (known: {})", KNOWN_KEYS.join(", "));
        }
        let solve_default = SolveConfig::default();
        let em_default = EmConfig::default();
        let alpha = pick(flags.alpha, &kv, "alpha", 0.01)?;
        let taus = match &flags.taus {
            Some(t) => t.clone(),
            None => match kv.get("taus") {
                Some(text) => parse_list(text).context("config key `taus`")?,
                None => vec![1.0 / 16.0, 0.25, 1.0, 4.0],
            },
        };
        if let Some(t) = taus.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
            bail!("tau {t} must be positive and finite");
        }
        let seed = pick(flags.seed, &kv, "seed", 0)?;
        let solve = SolveConfig {
            grad_tolerance: pick(flags.grad_tolerance, &kv, "grad_tolerance", solve_default.grad_tolerance)?,
            max_iters: pick(flags.max_iters, &kv, "max_iters", solve_default.max_iters)?,
            ..solve_default
        };
        let em = EmConfig {
            components: pick(flags.em_components, &kv, "em_components", em_default.components)?,
            restarts: pick(flags.em_restarts, &kv, "em_restarts", em_default.restarts)?,
            max_iters: pick(None, &kv, "em_max_iters", em_default.max_iters)?,
            ll_tolerance: pick(None, &kv, "em_tolerance", em_default.ll_tolerance)?,
            seed,
            ..em_default
        };
        let market_source = match flags.market_source {
            Some(m) => m,
            None => kv.get("market_source").map(MarketSource::from_str).transpose()?.unwrap_or_default(),
        };
        let out_dir = flags
            .out_dir
            .clone()
            .or_else(|| kv.get("out_dir").map(PathBuf::from))
            .or(env_out_dir)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(Self {
            alpha: Probability::new(alpha)?,
            horizon: pick(flags.horizon, &kv, "horizon", 180)?,
            taus,
            seed,
            solve,
            em,
            market_source,
            out_dir,
        })
    }
}

fn pick<T: FromStr>(flag: Option<T>, kv: &KeyValues, key: &str, default: T) -> Result<T> {
    match flag {
        Some(v) => Ok(v),
        None => Ok(kv.parse_value(key)?.unwrap_or(default)),
    }
}

/// Parse a list of numbers separated by commas and/or whitespace; fractions
/// such as `1/16` are accepted.
pub fn parse_list(text: &str) -> Result<Vec<f64>> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(parse_number)
        .collect()
}

pub fn parse_number(token: &str) -> Result<f64> {
    let value = match token.split_once('/') {
        Some((a, b)) => a.trim().parse::<f64>()? / b.trim().parse::<f64>()?,
        None => token.trim().parse::<f64>()?,
    };
    if !value.is_finite() {
        bail!("`{token}` is not a finite number");
    }
    Ok(value)
}
