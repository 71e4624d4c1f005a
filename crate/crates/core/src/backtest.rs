//! Strategy construction, rolling-horizon backtests and synthetic studies.
//!
//! Five strategies build a portfolio from a trailing window of `H` periods:
//!
//! * `LstM`: the last observed market-capitalization row;
//! * `AvgM`: the window average of the cap rows;
//! * `StDev`: minimum standard deviation under the window covariance;
//! * `CVaR_N`: minimum CVaR under a normal fit of the window;
//! * `CVaR_M`: minimum exact CVaR under an EM mixture fit of the window.
//!
//! `CVaR_N` and `CVaR_M` optionally blend in market equilibrium first: the
//! window means are replaced by the GLS-adjusted means for confidence `τ`,
//! with the market portfolio taken from the last or the average cap row.
//!
//! Window covariances get the same `1e-8 · trace / n` ridge as EM.
//!
//! Evaluation conventions: the sample average, the population (`1/T`)
//! standard deviation, and the empirical CVaR at level `α` as the negated
//! mean of the `⌈αT⌉` worst observations.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::bl::{adjusted_mu_mixture, adjusted_mu_normal, equilibrium_target_mixture, equilibrium_target_normal};
use crate::distn::Probability;
use crate::error::{Error, Result};
use crate::fit::{fit_mixture_em, sample_moments, EmConfig};
use crate::model::{quad_form, MixtureModel, Portfolio};
use crate::optimize::{
    min_cvar_mixture_exact, min_cvar_normal, min_stdev, ExpectedReturnFloor, SolveConfig, SolveResult,
};
use crate::risk::cvar_mixture_exact;
use crate::rng::{derive_seed, stream_rng, STREAM_REPLICATION};

const CAP_SUM_TOL: f64 = 1e-6;
const RIDGE_SCALE: f64 = 1e-8;

/// Per-period returns (percent) and cap fractions for `n` assets.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketData {
    returns: DMatrix<f64>,
    caps: DMatrix<f64>,
    labels: Vec<String>,
    dates: Vec<String>,
}

impl MarketData {
    pub fn new(returns: DMatrix<f64>, caps: DMatrix<f64>, labels: Vec<String>, dates: Vec<String>) -> Result<Self> {
        let (t, n) = returns.shape();
        if caps.shape() != (t, n) || labels.len() != n || dates.len() != t {
            return Err(Error::Dimension(format!(
                "returns {t}x{n}, caps {}x{}, {} labels, {} dates",
                caps.nrows(),
                caps.ncols(),
                labels.len(),
                dates.len()
            )));
        }
        if t == 0 || n == 0 {
            return Err(Error::InvalidArgument("market data needs at least one period and one asset".into()));
        }
        if let Some(i) = (0..t).find(|i| returns.row(*i).iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidArgument(format!("returns in period {} are not finite", i + 1)));
        }
        for (i, row) in caps.row_iter().enumerate() {
            if row.iter().any(|c| !(*c > 0.0 && c.is_finite())) {
                return Err(Error::InvalidArgument(format!("caps in period {} must be positive", i + 1)));
            }
            if (row.sum() - 1.0).abs() > CAP_SUM_TOL {
                return Err(Error::InvalidArgument(format!("caps in period {} sum to {}", i + 1, row.sum())));
            }
        }
        Ok(Self { returns, caps, labels, dates })
    }

    pub fn periods(&self) -> usize {
        self.returns.nrows()
    }

    pub fn assets(&self) -> usize {
        self.returns.ncols()
    }

    pub fn returns(&self) -> &DMatrix<f64> {
        &self.returns
    }

    pub fn caps(&self) -> &DMatrix<f64> {
        &self.caps
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn dates(&self) -> &[String] {
        &self.dates
    }
}

/// Aggregate stock-level data into sectors.
///
/// Sector returns are cap-weighted means of member returns; sector caps are
/// member cap sums as fractions of the period total. Stocks with zero cap in
/// a period are ignored for that period.
pub fn sector_aggregate(
    stock_returns: &DMatrix<f64>,
    stock_caps: &DMatrix<f64>,
    sector_of: &[usize],
    sector_labels: Vec<String>,
    dates: Vec<String>,
) -> Result<MarketData> {
    let (t, s) = stock_returns.shape();
    let k = sector_labels.len();
    if stock_caps.shape() != (t, s) || sector_of.len() != s {
        return Err(Error::Dimension(format!(
            "stock returns {t}x{s}, caps {}x{}, {} sector assignments",
            stock_caps.nrows(),
            stock_caps.ncols(),
            sector_of.len()
        )));
    }
    if let Some(j) = sector_of.iter().position(|g| *g >= k) {
        return Err(Error::InvalidArgument(format!("stock {j} maps to unknown sector {}", sector_of[j])));
    }
    if stock_caps.iter().any(|c| !(*c >= 0.0 && c.is_finite())) {
        return Err(Error::InvalidArgument("stock caps must be finite and nonnegative".into()));
    }
    let mut returns = DMatrix::zeros(t, k);
    let mut caps = DMatrix::zeros(t, k);
    for i in 0..t {
        for j in 0..s {
            let c = stock_caps[(i, j)];
            returns[(i, sector_of[j])] += c * stock_returns[(i, j)];
            caps[(i, sector_of[j])] += c;
        }
        for g in 0..k {
            if caps[(i, g)] <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "sector `{}` has no capitalization in period {}",
                    sector_labels[g],
                    i + 1
                )));
            }
            returns[(i, g)] /= caps[(i, g)];
        }
        let total = caps.row(i).sum();
        caps.row_mut(i).scale_mut(1.0 / total);
    }
    MarketData::new(returns, caps, sector_labels, dates)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StrategyKind {
    LstM,
    AvgM,
    StDev,
    CvarN,
    CvarM,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] = [Self::LstM, Self::AvgM, Self::StDev, Self::CvarN, Self::CvarM];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::LstM => "LstM",
            Self::AvgM => "AvgM",
            Self::StDev => "StDev",
            Self::CvarN => "CVaR_N",
            Self::CvarM => "CVaR_M",
        }
    }

    fn estimates(self) -> bool {
        !matches!(self, Self::LstM | Self::AvgM)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s) || k.as_str().replace('_', "-").eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown strategy `{s}` (expected LstM, AvgM, StDev, CVaR_N or CVaR_M)")))
    }
}

/// Which cap rows define the market portfolio for equilibrium blending.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MarketSource {
    Last,
    #[default]
    Average,
}

impl FromStr for MarketSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "last" => Ok(Self::Last),
            "average" | "avg" => Ok(Self::Average),
            _ => Err(Error::InvalidArgument(format!("unknown market source `{s}` (expected last or average)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlSpec {
    pub tau: f64,
    pub market_source: MarketSource,
}

/// The expected-return floor `μ̂^T x >= μ_0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FloorRule {
    /// A fixed `μ_0`.
    Level(f64),
    /// `μ_0 = k · μ̂^T x^m` with the average-cap market portfolio `x^m`.
    MarketMultiple(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategySpec {
    pub kind: StrategyKind,
    pub bl: Option<BlSpec>,
    pub floor: Option<FloorRule>,
    pub alpha: Probability,
    pub em: EmConfig,
    pub solve: SolveConfig,
}

impl StrategySpec {
    pub fn new(kind: StrategyKind, alpha: Probability) -> Self {
        Self { kind, bl: None, floor: None, alpha, em: EmConfig::default(), solve: SolveConfig::default() }
    }

    pub fn with_bl(mut self, tau: f64, market_source: MarketSource) -> Result<Self> {
        if !matches!(self.kind, StrategyKind::CvarN | StrategyKind::CvarM) {
            return Err(Error::InvalidArgument(format!("equilibrium blending does not apply to {}", self.kind)));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::InvalidArgument(format!("tau = {tau} must be positive and finite")));
        }
        self.bl = Some(BlSpec { tau, market_source });
        Ok(self)
    }

    pub fn with_floor(mut self, floor: FloorRule) -> Result<Self> {
        if !self.kind.estimates() {
            return Err(Error::InvalidArgument(format!("an expected-return floor does not apply to {}", self.kind)));
        }
        self.floor = Some(floor);
        Ok(self)
    }

    pub fn name(&self) -> String {
        let mut name = self.kind.to_string();
        if let Some(bl) = self.bl {
            name += &format!("(tau={})", bl.tau);
        }
        match self.floor {
            Some(FloorRule::Level(l)) => name += &format!("[mu0={l}]"),
            Some(FloorRule::MarketMultiple(k)) => name += &format!("[mu0={k}*market]"),
            None => {}
        }
        name
    }

    /// Canonical ordering: by strategy kind, then plain before blended,
    /// then by increasing `τ`, then unconstrained before floored.
    pub fn sort_key(&self) -> (StrategyKind, bool, u64, bool) {
        let tau = self.bl.map_or(0, |b| b.tau.to_bits());
        (self.kind, self.bl.is_some(), tau, self.floor.is_some())
    }
}

/// A built portfolio and whether its solver converged.
#[derive(Debug, Clone, PartialEq)]
pub struct BuildOutcome {
    pub x: Portfolio,
    pub converged: bool,
}

/// Estimates shared by all strategies on one window, computed on demand.
struct Estimates {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    market_last: Portfolio,
    market_avg: Portfolio,
    source: MixtureSource,
}

enum MixtureSource {
    Known(MixtureModel),
    Window { returns: DMatrix<f64>, fits: Vec<(u64, std::result::Result<MixtureModel, String>)> },
}

impl Estimates {
    fn from_window(returns: &DMatrix<f64>, caps: &DMatrix<f64>) -> Result<Self> {
        let (mean, mut cov) = sample_moments(returns)?;
        let n = cov.nrows();
        let ridge = RIDGE_SCALE * cov.trace() / n as f64;
        for j in 0..n {
            cov[(j, j)] += ridge;
        }
        let h = caps.nrows();
        let market_last = Portfolio::from_simplex_point(caps.row(h - 1).transpose());
        let market_avg = Portfolio::from_simplex_point(caps.row_mean().transpose());
        Ok(Self { mean, cov, market_last, market_avg, source: MixtureSource::Window { returns: returns.clone(), fits: Vec::new() } })
    }

    fn from_truth(truth: &MixtureModel) -> Self {
        let (mean, cov) = truth.moments();
        let market = Portfolio::equal(truth.dim());
        Self { mean, cov, market_last: market.clone(), market_avg: market, source: MixtureSource::Known(truth.clone()) }
    }

    fn market(&self, source: MarketSource) -> &Portfolio {
        match source {
            MarketSource::Last => &self.market_last,
            MarketSource::Average => &self.market_avg,
        }
    }

    fn mixture(&mut self, em: &EmConfig) -> Result<MixtureModel> {
        match &mut self.source {
            MixtureSource::Known(m) => Ok(m.clone()),
            MixtureSource::Window { returns, fits } => {
                let key = em_key(em);
                if let Some((_, fit)) = fits.iter().find(|(k, _)| *k == key) {
                    return fit.clone().map_err(Error::EmFailed);
                }
                let fit = fit_mixture_em(returns, em).map(|r| r.model).map_err(|e| e.to_string());
                fits.push((key, fit.clone()));
                fit.map_err(Error::EmFailed)
            }
        }
    }

    fn floor(&self, rule: Option<FloorRule>) -> Result<Option<ExpectedReturnFloor>> {
        let level = match rule {
            None => return Ok(None),
            Some(FloorRule::Level(l)) => l,
            Some(FloorRule::MarketMultiple(k)) => k * self.mean.dot(self.market_avg.weights()),
        };
        ExpectedReturnFloor::new(self.mean.clone(), level).map(Some)
    }
}

fn em_key(em: &EmConfig) -> u64 {
    let mut h = derive_seed(em.seed, em.components as u64);
    h = derive_seed(h, em.restarts as u64);
    h = derive_seed(h, em.max_iters as u64);
    h = derive_seed(h, em.ll_tolerance.to_bits());
    derive_seed(h, em.ridge.map_or(u64::MAX, f64::to_bits))
}

fn solved(r: SolveResult) -> BuildOutcome {
    BuildOutcome { x: r.x, converged: r.converged }
}

fn build(spec: &StrategySpec, est: &mut Estimates, em_seed: u64) -> Result<BuildOutcome> {
    let floor = est.floor(spec.floor)?;
    let floor = floor.as_ref();
    match spec.kind {
        StrategyKind::LstM => Ok(BuildOutcome { x: est.market_last.clone(), converged: true }),
        StrategyKind::AvgM => Ok(BuildOutcome { x: est.market_avg.clone(), converged: true }),
        StrategyKind::StDev => min_stdev(&est.cov, &spec.solve, floor).map(solved),
        StrategyKind::CvarN => {
            let mu = match spec.bl {
                None => est.mean.clone(),
                Some(bl) => {
                    let target = equilibrium_target_normal(&est.cov, est.market(bl.market_source), spec.alpha)?;
                    adjusted_mu_normal(&target, &est.mean, &est.cov, bl.tau)?.0
                }
            };
            min_cvar_normal(&mu, &est.cov, spec.alpha, &spec.solve, floor).map(solved)
        }
        StrategyKind::CvarM => {
            let em = EmConfig { seed: em_seed, ..spec.em.clone() };
            let mut mix = est.mixture(&em)?;
            if let Some(bl) = spec.bl {
                let target = equilibrium_target_mixture(&mix, est.market(bl.market_source), spec.alpha)?;
                let (means, _) = adjusted_mu_mixture(&target, mix.means(), &est.cov, mix.covariances(), bl.tau)?;
                mix = mix.with_means(means)?;
            }
            min_cvar_mixture_exact(&mix, spec.alpha, &spec.solve, floor).map(solved)
        }
    }
}

/// Build one strategy's portfolio from a window of returns and caps.
///
/// `index` selects the EM seed stream (`derive_seed(spec.em.seed, index)`).
pub fn build_portfolio(
    spec: &StrategySpec,
    returns_window: &DMatrix<f64>,
    caps_window: &DMatrix<f64>,
    index: u64,
) -> Result<BuildOutcome> {
    let h = returns_window.nrows();
    let n = returns_window.ncols();
    if caps_window.shape() != (h, n) {
        return Err(Error::Dimension("returns and caps windows differ in shape".into()));
    }
    if h == 0 {
        return Err(Error::InvalidArgument("empty window".into()));
    }
    if spec.kind.estimates() && h < n + 2 {
        return Err(Error::InvalidArgument(format!("window of {h} periods is too short for {n} assets (need {})", n + 2)));
    }
    if !spec.kind.estimates() {
        let x = match spec.kind {
            StrategyKind::LstM => caps_window.row(h - 1).transpose(),
            _ => caps_window.row_mean().transpose(),
        };
        return Ok(BuildOutcome { x: Portfolio::from_simplex_point(x), converged: true });
    }
    let mut est = Estimates::from_window(returns_window, caps_window)?;
    build(spec, &mut est, derive_seed(spec.em.seed, index))
}

/// Summary statistics of a realized return series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub count: usize,
    pub avg: f64,
    /// Population standard deviation; absent for a single observation.
    pub stdev: Option<f64>,
    pub cvar: f64,
    pub avg_over_stdev: Option<f64>,
    pub avg_over_cvar: Option<f64>,
}

/// `-mean` of the `⌈αT⌉` smallest values.
pub fn empirical_cvar(series: &[f64], alpha: Probability) -> Result<f64> {
    if series.is_empty() {
        return Err(Error::InvalidArgument("empty return series".into()));
    }
    let k = tail_count(series.len(), alpha.value());
    let mut sorted = series.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(-sorted[..k].iter().sum::<f64>() / k as f64)
}

fn tail_count(len: usize, alpha: f64) -> usize {
    // Guard against α·T landing a hair above an integer.
    let raw = alpha * len as f64;
    let k = (raw - 1e-9 * raw.max(1.0)).ceil() as usize;
    k.clamp(1, len)
}

pub fn metrics(series: &[f64], alpha_eval: Probability) -> Result<Metrics> {
    let t = series.len();
    let cvar = empirical_cvar(series, alpha_eval)?;
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("return series has non-finite values".into()));
    }
    let avg = series.iter().sum::<f64>() / t as f64;
    let stdev = (t >= 2).then(|| (series.iter().map(|v| (v - avg) * (v - avg)).sum::<f64>() / t as f64).sqrt());
    let ratio = |d: Option<f64>| d.filter(|d| *d != 0.0).map(|d| avg / d);
    Ok(Metrics { count: t, avg, stdev, cvar, avg_over_stdev: ratio(stdev), avg_over_cvar: ratio(Some(cvar)) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestReport {
    pub strategy: String,
    /// Row indices of the evaluation periods.
    pub periods: Vec<usize>,
    pub dates: Vec<String>,
    pub portfolios: Vec<Portfolio>,
    pub returns: Vec<f64>,
    pub metrics: Metrics,
    /// Periods whose solver stopped before meeting its tolerance.
    pub unconverged: usize,
}

/// One strategy over periods `eval` (row indices), each built from the
/// preceding `h` rows only.
pub fn rolling_backtest(data: &MarketData, spec: &StrategySpec, h: usize, eval: Range<usize>) -> Result<BacktestReport> {
    Ok(rolling_backtest_many(data, std::slice::from_ref(spec), h, eval)?.remove(0))
}

/// Several strategies over the same periods; window estimates (including EM
/// fits with identical settings) are shared between strategies.
pub fn rolling_backtest_many(
    data: &MarketData,
    specs: &[StrategySpec],
    h: usize,
    eval: Range<usize>,
) -> Result<Vec<BacktestReport>> {
    if specs.is_empty() {
        return Err(Error::InvalidArgument("no strategies".into()));
    }
    if h == 0 || eval.start < h || eval.end > data.periods() || eval.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "evaluation periods {}..{} need {h} prior rows and must lie within {} periods",
            eval.start,
            eval.end,
            data.periods()
        )));
    }
    let n = data.assets();
    if specs.iter().any(|s| s.kind.estimates()) && h < n + 2 {
        return Err(Error::InvalidArgument(format!("window of {h} periods is too short for {n} assets (need {})", n + 2)));
    }
    let periods: Vec<usize> = eval.collect();
    let built: Vec<Vec<BuildOutcome>> = periods
        .par_iter()
        .map(|&t| {
            let returns = data.returns.rows(t - h, h).into_owned();
            let caps = data.caps.rows(t - h, h).into_owned();
            let mut est = Estimates::from_window(&returns, &caps)?;
            specs.iter().map(|s| build(s, &mut est, derive_seed(s.em.seed, t as u64))).collect()
        })
        .collect::<Result<_>>()?;
    specs
        .iter()
        .enumerate()
        .map(|(k, spec)| {
            let portfolios: Vec<Portfolio> = built.iter().map(|b| b[k].x.clone()).collect();
            let returns: Vec<f64> =
                periods.iter().zip(&portfolios).map(|(t, x)| data.returns.row(*t).transpose().dot(x.weights())).collect();
            Ok(BacktestReport {
                strategy: spec.name(),
                periods: periods.clone(),
                dates: periods.iter().map(|t| data.dates[*t].clone()).collect(),
                metrics: metrics(&returns, spec.alpha)?,
                unconverged: built.iter().filter(|b| !b[k].converged).count(),
                portfolios,
                returns,
            })
        })
        .collect()
}

/// Population statistics of a portfolio under a known model.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyRow {
    pub strategy: String,
    pub x: Portfolio,
    pub avg: f64,
    pub stdev: f64,
    pub cvar: f64,
    pub converged: bool,
}

/// Build every strategy with the true model as its estimate and report exact
/// population mean, standard deviation and CVaR at `alpha`.
///
/// The market portfolio is `e / n`; `LstM` and `AvgM` both denote it.
pub fn true_distribution_study(truth: &MixtureModel, alpha: Probability, strategies: &[StrategySpec]) -> Result<Vec<StudyRow>> {
    let (mean, cov) = truth.moments();
    let mut est = Estimates::from_truth(truth);
    strategies
        .iter()
        .map(|spec| {
            let outcome = build(spec, &mut est, 0)?;
            let x = outcome.x.weights();
            let exact = cvar_mixture_exact(&truth.project(&outcome.x)?, alpha)?;
            Ok(StudyRow {
                strategy: spec.name(),
                avg: mean.dot(x),
                stdev: quad_form(&cov, x).max(0.0).sqrt(),
                cvar: exact.cvar,
                converged: outcome.converged,
                x: outcome.x,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationConfig {
    pub reps: usize,
    pub train: usize,
    pub seed: u64,
    /// Levels of the empirical CVaR columns.
    pub levels: Vec<f64>,
}

impl ReplicationConfig {
    pub fn new(reps: usize, train: usize, seed: u64) -> Self {
        Self { reps, train, seed, levels: vec![0.01, 0.001, 0.0005] }
    }
}

/// Out-of-sample statistics of one strategy across replications.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationRow {
    pub strategy: String,
    pub successes: usize,
    pub failures: usize,
    pub avg: f64,
    pub stdev: Option<f64>,
    /// `(level, empirical CVaR)` pairs.
    pub cvar: Vec<(f64, f64)>,
    pub unconverged: usize,
    /// Out-of-sample return of every replication in order; `None` where the
    /// build failed.
    pub returns: Vec<Option<f64>>,
}

impl ReplicationRow {
    pub fn failure_rate(&self) -> f64 {
        self.failures as f64 / (self.successes + self.failures).max(1) as f64
    }
}

/// Repeat: draw `train + 1` returns from `truth`, build every strategy on the
/// first `train` (market = `e / n`), evaluate on the last. Replication `r`
/// draws from stream `STREAM_REPLICATION + r` and fits EM with seed
/// `derive_seed(em.seed, r)`, so results do not depend on scheduling.
/// Failed builds are excluded and counted.
pub fn replication_study(truth: &MixtureModel, cfg: &ReplicationConfig, strategies: &[StrategySpec]) -> Result<Vec<ReplicationRow>> {
    let n = truth.dim();
    if cfg.reps == 0 {
        return Err(Error::InvalidArgument("reps must be at least 1".into()));
    }
    if cfg.train < n + 2 {
        return Err(Error::InvalidArgument(format!("train = {} must be at least n + 2 = {}", cfg.train, n + 2)));
    }
    let levels = cfg.levels.iter().map(|l| Probability::new(*l)).collect::<Result<Vec<_>>>()?;
    let caps = DMatrix::from_element(cfg.train, n, 1.0 / n as f64);
    let outcomes: Vec<Vec<std::result::Result<(f64, bool), String>>> = (0..cfg.reps)
        .into_par_iter()
        .map(|r| {
            let draws = truth.sample(cfg.train + 1, &mut stream_rng(cfg.seed, STREAM_REPLICATION + r as u64))?;
            let train = draws.rows(0, cfg.train).into_owned();
            let test = draws.row(cfg.train).transpose();
            let mut est = Estimates::from_window(&train, &caps)?;
            Ok(strategies
                .iter()
                .map(|s| {
                    build(s, &mut est, derive_seed(s.em.seed, r as u64))
                        .map(|b| (test.dot(b.x.weights()), b.converged))
                        .map_err(|e| e.to_string())
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    strategies
        .iter()
        .enumerate()
        .map(|(k, spec)| {
            let ok: Vec<(f64, bool)> = outcomes.iter().filter_map(|o| o[k].as_ref().ok().copied()).collect();
            let failures = cfg.reps - ok.len();
            if failures > 0 {
                if let Some(Err(e)) = outcomes.iter().map(|o| &o[k]).find(|o| o.is_err()) {
                    log::warn!("{}: {failures} of {} replications failed (first: {e})", spec.name(), cfg.reps);
                }
            }
            let series: Vec<f64> = ok.iter().map(|o| o.0).collect();
            let (avg, stdev, cvar) = if series.is_empty() {
                (f64::NAN, None, levels.iter().map(|l| (l.value(), f64::NAN)).collect())
            } else {
                let m = metrics(&series, levels.first().copied().unwrap_or(spec.alpha))?;
                let cvar = levels.iter().map(|l| Ok((l.value(), empirical_cvar(&series, *l)?))).collect::<Result<_>>()?;
                (m.avg, m.stdev, cvar)
            };
            Ok(ReplicationRow {
                strategy: spec.name(),
                successes: ok.len(),
                failures,
                avg,
                stdev,
                cvar,
                unconverged: ok.iter().filter(|o| !o.1).count(),
                returns: outcomes.iter().map(|o| o[k].as_ref().ok().map(|v| v.0)).collect(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(v: f64) -> Probability {
        Probability::new(v).unwrap()
    }

    fn toy_data(t: usize, seed: u64) -> MarketData {
        let mix = MixtureModel::diagonal(
            vec![0.2, 0.8],
            vec![vec![-1.0, 0.0, 0.5], vec![1.5, 1.0, 1.2]],
            vec![vec![6.0, 8.0, 5.0], vec![4.0, 3.0, 3.5]],
        )
        .unwrap();
        crate::data::generate_synthetic(&mix, t, crate::data::CapRule::Dirichlet { concentration: 20.0 }, seed).unwrap()
    }

    #[test]
    fn sector_aggregation() {
        let r = DMatrix::from_row_slice(1, 2, &[1.0, 3.0]);
        let c = DMatrix::from_row_slice(1, 2, &[5.0, 5.0]);
        let d = sector_aggregate(&r, &c, &[0, 0], vec!["S".into()], vec!["1".into()]).unwrap();
        assert_eq!(d.returns()[(0, 0)], 2.0);
        assert_eq!(d.caps()[(0, 0)], 1.0);

        let r = DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 0.5, 4.0]);
        let c = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 1.0]);
        let d = sector_aggregate(&r, &c, &[0, 1], vec!["A".into(), "B".into()], vec!["1".into(), "2".into()]).unwrap();
        assert_eq!(d.returns(), &r);
        assert_eq!(d.caps()[(0, 0)], 0.75);

        let r = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let c = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 2.0, 1.0]);
        let d = sector_aggregate(&r, &c, &[0, 1, 0], vec!["A".into(), "B".into()], vec!["1".into(), "2".into()]).unwrap();
        assert!((d.returns()[(0, 0)] - (1.0 + 9.0) / 4.0).abs() < 1e-15);
        assert!((d.returns()[(1, 0)] - (8.0 + 6.0) / 3.0).abs() < 1e-15);
        assert!((d.caps()[(1, 1)] - 0.4).abs() < 1e-15);

        let c = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 3.0, 2.0, 2.0, 1.0]);
        assert!(sector_aggregate(&r, &c, &[0, 1, 0], vec!["A".into(), "B".into()], vec!["1".into(), "2".into()]).is_err());
    }

    #[test]
    fn market_portfolios() {
        let spec = StrategySpec::new(StrategyKind::LstM, p(0.01));
        let caps = DMatrix::from_row_slice(2, 3, &[0.1, 0.1, 0.8, 0.2, 0.3, 0.5]);
        let r = DMatrix::zeros(2, 3);
        assert_eq!(build_portfolio(&spec, &r, &caps, 0).unwrap().x.as_slice(), &[0.2, 0.3, 0.5]);
        let caps = DMatrix::from_fn(4, 3, |_, j| [0.2, 0.3, 0.5][j]);
        let spec = StrategySpec::new(StrategyKind::AvgM, p(0.01));
        let x = build_portfolio(&spec, &DMatrix::zeros(4, 3), &caps, 0).unwrap().x;
        assert!((x.weights() - DVector::from_vec(vec![0.2, 0.3, 0.5])).amax() < 1e-15);
    }

    #[test]
    fn bl_normal_small_tau_tracks_market() {
        let data = toy_data(60, 1);
        let spec = StrategySpec::new(StrategyKind::CvarN, p(0.01)).with_bl(1e-8, MarketSource::Last).unwrap();
        let h = 40;
        let r = data.returns().rows(0, h).into_owned();
        let c = data.caps().rows(0, h).into_owned();
        let x = build_portfolio(&spec, &r, &c, 0).unwrap().x;
        assert!((x.weights() - c.row(h - 1).transpose()).amax() < 1e-3);
    }

    #[test]
    fn bl_only_for_cvar() {
        assert!(StrategySpec::new(StrategyKind::StDev, p(0.01)).with_bl(1.0, MarketSource::Average).is_err());
        assert!(StrategySpec::new(StrategyKind::LstM, p(0.01)).with_floor(FloorRule::Level(1.0)).is_err());
    }

    #[test]
    fn metrics_examples() {
        let m = metrics(&[1.0, 1.0, 1.0, 1.0], p(0.25)).unwrap();
        assert_eq!(m.avg, 1.0);
        assert_eq!(m.stdev, Some(0.0));
        assert_eq!(m.cvar, -1.0);
        assert!(m.avg_over_stdev.is_none());
        let mut s = vec![0.0; 100];
        s[0] = -10.0;
        assert_eq!(metrics(&s, p(0.01)).unwrap().cvar, 10.0);
        let one = metrics(&[2.0], p(0.01)).unwrap();
        assert!(one.stdev.is_none());
    }

    #[test]
    fn empirical_cvar_matches_sort_oracle() {
        let mut rng = stream_rng(3, 0);
        use rand::Rng;
        for len in [7usize, 180, 1000] {
            let s: Vec<f64> = (0..len).map(|_| rng.random::<f64>() * 20.0 - 10.0).collect();
            for a in [0.01, 0.05, 0.2] {
                let k = ((a * len as f64) - 1e-12).ceil().max(1.0) as usize;
                let mut sorted = s.clone();
                sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
                let oracle = -sorted.iter().take(k).sum::<f64>() / k as f64;
                assert!((empirical_cvar(&s, p(a)).unwrap() - oracle).abs() < 1e-12);
            }
        }
        assert_eq!(tail_count(180, 0.01), 2);
        assert_eq!(tail_count(100, 0.01), 1);
        assert_eq!(tail_count(10_000, 0.0005), 5);
    }

    #[test]
    fn single_period_and_constant_data() {
        let data = toy_data(30, 2);
        let spec = StrategySpec::new(StrategyKind::StDev, p(0.01));
        let rep = rolling_backtest(&data, &spec, 20, 20..21).unwrap();
        assert_eq!(rep.returns.len(), 1);
        assert_eq!(rep.portfolios.len(), 1);

        let flat = MarketData::new(
            DMatrix::from_element(30, 3, 0.7),
            DMatrix::from_element(30, 3, 1.0 / 3.0),
            vec!["a".into(), "b".into(), "c".into()],
            (0..30).map(|i| i.to_string()).collect(),
        )
        .unwrap();
        for kind in [StrategyKind::LstM, StrategyKind::StDev, StrategyKind::CvarN] {
            let rep = rolling_backtest(&flat, &StrategySpec::new(kind, p(0.01)), 10, 10..30).unwrap();
            assert!(rep.metrics.stdev.unwrap() < 1e-12, "{kind}");
        }
    }

    #[test]
    fn lstm_average_is_market_return() {
        let data = toy_data(50, 3);
        let rep = rolling_backtest(&data, &StrategySpec::new(StrategyKind::LstM, p(0.01)), 10, 10..50).unwrap();
        let direct: f64 = (10..50).map(|t| data.returns().row(t).dot(&data.caps().row(t - 1))).sum::<f64>() / 40.0;
        assert!((rep.metrics.avg - direct).abs() < 1e-12);
    }

    #[test]
    fn no_look_ahead() {
        let data = toy_data(60, 4);
        let specs = vec![
            StrategySpec::new(StrategyKind::LstM, p(0.01)),
            StrategySpec::new(StrategyKind::AvgM, p(0.01)),
            StrategySpec::new(StrategyKind::StDev, p(0.01)),
            StrategySpec::new(StrategyKind::CvarN, p(0.01)),
            StrategySpec::new(StrategyKind::CvarM, p(0.01)),
        ];
        let base = rolling_backtest_many(&data, &specs, 40, 45..46).unwrap();
        let mut returns = data.returns().clone();
        let mut caps = data.caps().clone();
        for t in 45..60 {
            returns.row_mut(t).fill(1e3);
            caps.row_mut(t).copy_from(&DMatrix::from_row_slice(1, 3, &[0.98, 0.01, 0.01]));
        }
        let perturbed = MarketData::new(returns, caps, data.labels().to_vec(), data.dates().to_vec()).unwrap();
        let after = rolling_backtest_many(&perturbed, &specs, 40, 45..46).unwrap();
        for (a, b) in base.iter().zip(&after) {
            assert_eq!(a.portfolios, b.portfolios, "{}", a.strategy);
        }
    }

    #[test]
    fn portfolios_stay_on_simplex() {
        let data = toy_data(80, 5);
        let specs: Vec<StrategySpec> = StrategyKind::ALL.iter().map(|k| StrategySpec::new(*k, p(0.01))).collect();
        for rep in rolling_backtest_many(&data, &specs, 40, 40..50).unwrap() {
            for x in &rep.portfolios {
                assert!((x.weights().sum() - 1.0).abs() < 1e-9);
                assert!(x.weights().min() >= 0.0);
            }
        }
    }

    #[test]
    fn invalid_ranges_rejected() {
        let data = toy_data(30, 6);
        let spec = StrategySpec::new(StrategyKind::StDev, p(0.01));
        assert!(rolling_backtest(&data, &spec, 20, 10..25).is_err());
        assert!(rolling_backtest(&data, &spec, 20, 25..31).is_err());
        assert!(rolling_backtest(&data, &spec, 3, 5..10).is_err());
    }

    #[test]
    fn single_asset_study_rows_identical() {
        let truth = MixtureModel::diagonal(vec![0.3, 0.7], vec![vec![-1.0], vec![2.0]], vec![vec![5.0], vec![3.0]]).unwrap();
        let specs = vec![
            StrategySpec::new(StrategyKind::LstM, p(0.01)),
            StrategySpec::new(StrategyKind::CvarN, p(0.01)),
            StrategySpec::new(StrategyKind::CvarM, p(0.01)),
            StrategySpec::new(StrategyKind::CvarM, p(0.01)).with_bl(0.25, MarketSource::Average).unwrap(),
        ];
        let rows = true_distribution_study(&truth, p(0.01), &specs).unwrap();
        for r in &rows {
            assert_eq!(r.x.as_slice(), &[1.0]);
            assert_eq!(r.cvar, rows[0].cvar);
        }
    }

    #[test]
    fn replication_is_deterministic_and_handles_one_rep() {
        let truth = MixtureModel::diagonal(vec![0.3, 0.7], vec![vec![-1.0, 0.5], vec![2.0, 1.0]], vec![vec![5.0, 4.0], vec![3.0, 2.0]])
            .unwrap();
        let specs = vec![
            StrategySpec::new(StrategyKind::LstM, p(0.01)),
            StrategySpec::new(StrategyKind::CvarM, p(0.01)).with_bl(1.0, MarketSource::Average).unwrap(),
        ];
        let cfg = ReplicationConfig::new(20, 40, 9);
        let a = replication_study(&truth, &cfg, &specs).unwrap();
        let b = replication_study(&truth, &cfg, &specs).unwrap();
        assert_eq!(a, b);
        let one = replication_study(&truth, &ReplicationConfig::new(1, 40, 9), &specs).unwrap();
        assert!(one[0].stdev.is_none());
        assert_eq!(one[0].successes, 1);
    }
}
