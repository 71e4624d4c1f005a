//! Subcommand implementations.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::warn;
use mixcvar::backtest::{
    replication_study, rolling_backtest_many, true_distribution_study, FloorRule, MarketSource, ReplicationConfig,
    StrategyKind, StrategySpec,
};
use mixcvar::bl::{adjusted_mu_mixture, adjusted_mu_normal, equilibrium_target_mixture, equilibrium_target_normal};
use mixcvar::data::{load_market_data, load_model, read_table, save_model, CsvTable};
use mixcvar::fit::{fit_mixture_em, sample_moments};
use mixcvar::optimize::{
    min_cvar_mixture_approx, min_cvar_mixture_exact, min_cvar_normal, min_stdev, ExpectedReturnFloor, SolveResult,
};
use mixcvar::risk::evaluate;
use mixcvar::{MixtureModel, Portfolio};
use nalgebra::DVector;

use crate::config::{parse_number, RunConfig};
use crate::output::{fmt2, fmt2_opt, full, full_opt, headers, render_table, write_csv};

fn asset_labels(n: usize) -> Vec<String> {
    (1..=n).map(|j| format!("asset{j}")).collect()
}

/// A model plus asset labels, either loaded or fitted to a returns file.
struct Source {
    model: MixtureModel,
    labels: Vec<String>,
}

fn load_source(model: Option<&Path>, returns: Option<&Path>, components: usize, cfg: &RunConfig) -> Result<Source> {
    match (model, returns) {
        (Some(path), None) => {
            let model = load_model(path).with_context(|| format!("loading model {}", path.display()))?;
            let labels = asset_labels(model.dim());
            Ok(Source { model, labels })
        }
        (None, Some(path)) => {
            let table = read_table(path)?;
            let model = if components == 1 {
                let (mu, sigma) = sample_moments(&table.values)?;
                MixtureModel::normal(mu, sigma)?
            } else {
                let em = mixcvar::fit::EmConfig { components, ..cfg.em.clone() };
                fit_mixture_em(&table.values, &em)?.model
            };
            Ok(Source { model, labels: table.labels })
        }
        _ => bail!("give exactly one of --model or --returns"),
    }
}

fn read_weights(path: &Path, labels: &[String]) -> Result<Portfolio> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let mut weights = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.with_context(|| format!("{}: line {}", path.display(), i + 2))?;
        let value = record.get(1).with_context(|| format!("{}: line {} needs `asset,weight`", path.display(), i + 2))?;
        let w = parse_number(value).with_context(|| format!("{}: line {}", path.display(), i + 2))?;
        weights.push(w);
    }
    if weights.len() != labels.len() {
        bail!("{} has {} weights, the model has {} assets", path.display(), weights.len(), labels.len());
    }
    Ok(Portfolio::new(weights)?)
}

fn portfolio_rows(labels: &[String], x: &Portfolio) -> Vec<Vec<String>> {
    labels.iter().zip(x.as_slice()).map(|(l, w)| vec![l.clone(), full(*w)]).collect()
}

fn print_portfolio(labels: &[String], x: &Portfolio) {
    let rows: Vec<Vec<String>> = labels.iter().zip(x.as_slice()).map(|(l, w)| vec![l.clone(), fmt2(100.0 * w)]).collect();
    print!("{}", render_table(&headers(&["asset", "weight %"]), &rows));
}

pub fn fit(returns: &Path, components: usize, out: &Path, cfg: &RunConfig) -> Result<()> {
    let table = read_table(returns)?;
    let em = mixcvar::fit::EmConfig { components, ..cfg.em.clone() };
    let report = fit_mixture_em(&table.values, &em)?;
    save_model(&report.model, out).with_context(|| format!("writing {}", out.display()))?;
    let model = &report.model;
    println!(
        "EM fit: {} components on {} periods x {} assets; log-likelihood {:.4}; {} iterations ({}); start {} of {}",
        model.components(),
        table.values.nrows(),
        model.dim(),
        report.log_likelihood,
        report.iterations,
        if report.converged { "converged" } else { "iteration cap reached" },
        report.restart_index + 1,
        em.restarts
    );
    if report.degenerate_restarts > 0 {
        warn!("{} EM starts collapsed and were discarded", report.degenerate_restarts);
    }
    let mut head = vec!["".to_string()];
    let mut rho_row = vec!["rho".to_string()];
    for (i, r) in model.rho().iter().enumerate() {
        head.push(format!("mu{}", i + 1));
        head.push(format!("sigma{}", i + 1));
        rho_row.push(fmt2(*r));
        rho_row.push(String::new());
    }
    let mut rows = vec![rho_row];
    for (j, label) in table.labels.iter().enumerate() {
        let mut row = vec![label.clone()];
        for (mu, sigma) in model.means().iter().zip(model.covariances()) {
            row.push(fmt2(mu[j]));
            row.push(fmt2(sigma[(j, j)].sqrt()));
        }
        rows.push(row);
    }
    print!("{}", render_table(&head, &rows));
    println!("model written to {}", out.display());
    Ok(())
}

pub fn risk(model: &Path, weights: Option<&Path>, out: Option<&Path>, cfg: &RunConfig) -> Result<()> {
    let model = load_model(model).with_context(|| format!("loading model {}", model.display()))?;
    let labels = asset_labels(model.dim());
    let x = match weights {
        Some(p) => read_weights(p, &labels)?,
        None => Portfolio::equal(model.dim()),
    };
    let pm = model.project(&x)?;
    let r = evaluate(&pm, cfg.alpha)?;
    if r.cvar_upper.is_none() {
        warn!(
            "alpha = {} is not below min rho = {}; the additive CVaR upper bound does not apply",
            cfg.alpha.value(),
            model.rho().iter().cloned().fold(f64::INFINITY, f64::min)
        );
    } else if !r.upper_guaranteed {
        warn!("some component tail VaR is negative; the additive CVaR upper bound is not guaranteed here");
    }
    let entries: Vec<(&str, Option<f64>)> = vec![
        ("mean", Some(pm.mean())),
        ("stdev", Some(pm.variance().sqrt())),
        ("VaR", Some(r.var)),
        ("VaR lower", Some(r.var_lower)),
        ("VaR upper", Some(r.var_upper)),
        ("CVaR", Some(r.cvar)),
        ("CVaR lower", Some(r.cvar_lower)),
        ("CVaR upper", r.cvar_upper),
        ("kappa", r.kappa),
    ];
    let rows: Vec<Vec<String>> = entries.iter().map(|(k, v)| vec![k.to_string(), fmt2_opt(*v)]).collect();
    println!("portfolio risk at alpha = {}", cfg.alpha.value());
    print!("{}", render_table(&headers(&["measure", "value"]), &rows));
    if let Some(path) = out {
        let rows: Vec<Vec<String>> = entries.iter().map(|(k, v)| vec![k.to_string(), full_opt(*v)]).collect();
        write_csv(path, &headers(&["measure", "value"]), &rows)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Method {
    Stdev,
    CvarNormal,
    CvarMixture,
    CvarMixtureApprox,
}

pub struct OptimizeArgs<'a> {
    pub model: Option<&'a Path>,
    pub returns: Option<&'a Path>,
    pub method: Method,
    pub floor: Option<f64>,
    pub out: Option<&'a Path>,
}

pub fn optimize(args: &OptimizeArgs, cfg: &RunConfig) -> Result<()> {
    let components = if matches!(args.method, Method::Stdev | Method::CvarNormal) { 1 } else { cfg.em.components };
    let src = load_source(args.model, args.returns, components, cfg)?;
    let (mu, sigma) = src.model.moments();
    let floor = args.floor.map(|level| ExpectedReturnFloor::new(mu.clone(), level)).transpose()?;
    let floor = floor.as_ref();
    let a = cfg.alpha;
    let result: SolveResult = match args.method {
        Method::Stdev => min_stdev(&sigma, &cfg.solve, floor)?,
        Method::CvarNormal => min_cvar_normal(&mu, &sigma, a, &cfg.solve, floor)?,
        Method::CvarMixture => min_cvar_mixture_exact(&src.model, a, &cfg.solve, floor)?,
        Method::CvarMixtureApprox => min_cvar_mixture_approx(&src.model, a, &cfg.solve, floor)?,
    };
    if !result.converged {
        warn!("solver stopped after {} iterations with residual {:.2e}", result.iterations, result.kkt_residual);
    }
    let out = args.out.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_dir.join("portfolio.csv"));
    write_csv(&out, &headers(&["asset", "weight"]), &portfolio_rows(&src.labels, &result.x))?;
    println!(
        "objective {} (mean {}, {} iterations)",
        fmt2(result.objective),
        fmt2(mu.dot(result.x.weights())),
        result.iterations
    );
    print_portfolio(&src.labels, &result.x);
    println!("portfolio written to {}", out.display());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Pipeline {
    Normal,
    Mixture,
}

pub struct BlArgs<'a> {
    pub model: Option<&'a Path>,
    pub returns: Option<&'a Path>,
    pub caps: Option<&'a Path>,
    pub market: &'a str,
    pub tau: f64,
    pub pipeline: Pipeline,
}

fn market_portfolio(spec: &str, caps: Option<&Path>, labels: &[String]) -> Result<Portfolio> {
    let from_caps = |f: fn(&CsvTable) -> DVector<f64>| -> Result<Portfolio> {
        let path = caps.context("--market last|average needs --caps")?;
        let table = read_table(path)?;
        if table.labels.len() != labels.len() {
            bail!("{} has {} assets, expected {}", path.display(), table.labels.len(), labels.len());
        }
        Ok(Portfolio::from_vector(f(&table))?)
    };
    match spec {
        "last" => from_caps(|t| t.values.row(t.values.nrows() - 1).transpose()),
        "average" => from_caps(|t| t.values.row_mean().transpose()),
        "equal" => Ok(Portfolio::equal(labels.len())),
        path => read_weights(Path::new(path), labels),
    }
}

pub fn bl(args: &BlArgs, cfg: &RunConfig) -> Result<()> {
    let components = if args.pipeline == Pipeline::Normal { 1 } else { cfg.em.components };
    let src = load_source(args.model, args.returns, components, cfg)?;
    let xm = market_portfolio(args.market, args.caps, &src.labels)?;
    let a = cfg.alpha;
    let (pooled_mu, pooled) = src.model.moments();
    let (adjusted, lambda, x) = match args.pipeline {
        Pipeline::Normal => {
            let target = equilibrium_target_normal(&pooled, &xm, a)?;
            let (mu, lambda) = adjusted_mu_normal(&target, &pooled_mu, &pooled, args.tau)?;
            let x = min_cvar_normal(&mu, &pooled, a, &cfg.solve, None)?.x;
            (vec![(pooled_mu.clone(), mu)], lambda, x)
        }
        Pipeline::Mixture => {
            let mix = &src.model;
            let target = equilibrium_target_mixture(mix, &xm, a)?;
            let (means, lambda) = adjusted_mu_mixture(&target, mix.means(), &pooled, mix.covariances(), args.tau)?;
            let adjusted_model = mix.with_means(means.clone())?;
            let x = min_cvar_mixture_exact(&adjusted_model, a, &cfg.solve, None)?.x;
            (mix.means().iter().cloned().zip(means).collect(), lambda, x)
        }
    };
    let mut head = vec!["asset".to_string()];
    for i in 1..=adjusted.len() {
        head.push(format!("mu{i} estimate"));
        head.push(format!("mu{i} adjusted"));
    }
    head.push("market %".into());
    head.push("portfolio %".into());
    let rows: Vec<Vec<String>> = (0..src.labels.len())
        .map(|j| {
            let mut row = vec![src.labels[j].clone()];
            for (est, adj) in &adjusted {
                row.push(fmt2(est[j]));
                row.push(fmt2(adj[j]));
            }
            row.push(fmt2(100.0 * xm.weights()[j]));
            row.push(fmt2(100.0 * x.weights()[j]));
            row
        })
        .collect();
    println!("tau = {}, lambda = {}", args.tau, fmt2(lambda));
    print!("{}", render_table(&head, &rows));
    let deviation = (x.weights() - xm.weights()).amax();
    println!("max |x - x_m| = {deviation:.6}");
    let mut csv_head = vec!["asset".to_string()];
    for i in 1..=adjusted.len() {
        csv_head.push(format!("mu{i}_estimate"));
        csv_head.push(format!("mu{i}_adjusted"));
    }
    csv_head.push("market".into());
    csv_head.push("weight".into());
    let csv_rows: Vec<Vec<String>> = (0..src.labels.len())
        .map(|j| {
            let mut row = vec![src.labels[j].clone()];
            for (est, adj) in &adjusted {
                row.push(full(est[j]));
                row.push(full(adj[j]));
            }
            row.push(full(xm.weights()[j]));
            row.push(full(x.weights()[j]));
            row
        })
        .collect();
    let out = cfg.out_dir.join("bl.csv");
    write_csv(&out, &csv_head, &csv_rows)?;
    println!("adjusted means and portfolio written to {}", out.display());
    Ok(())
}

/// Parse `12.5`, `market`, `1.05*market` or `market*1.05`.
pub fn parse_floor(text: &str) -> Result<FloorRule> {
    let t = text.trim();
    if t == "market" {
        return Ok(FloorRule::MarketMultiple(1.0));
    }
    if let Some(k) = t.strip_suffix("*market").or_else(|| t.strip_prefix("market*")) {
        return Ok(FloorRule::MarketMultiple(parse_number(k)?));
    }
    Ok(FloorRule::Level(parse_number(t).with_context(|| format!("bad floor `{text}`"))?))
}

pub fn parse_strategies(text: &str) -> Result<Vec<StrategyKind>> {
    let kinds = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| match s.to_ascii_lowercase().as_str() {
            "market" => Ok(StrategyKind::LstM),
            _ => s.parse::<StrategyKind>().map_err(anyhow::Error::from),
        })
        .collect::<Result<Vec<_>>>()?;
    if kinds.is_empty() {
        bail!("no strategies given");
    }
    Ok(kinds)
}

/// Plain strategies plus one BL variant per `τ` for `CVaR_N` and `CVaR_M`,
/// in canonical order.
pub fn strategy_specs(
    kinds: &[StrategyKind],
    taus: &[f64],
    floor: Option<FloorRule>,
    source: MarketSource,
    cfg: &RunConfig,
) -> Result<Vec<StrategySpec>> {
    let mut specs = Vec::new();
    for &kind in kinds {
        let base = StrategySpec { em: cfg.em.clone(), solve: cfg.solve.clone(), ..StrategySpec::new(kind, cfg.alpha) };
        let with_floor = |s: StrategySpec| -> Result<StrategySpec> {
            match floor {
                Some(f) if kind != StrategyKind::LstM && kind != StrategyKind::AvgM => Ok(s.with_floor(f)?),
                _ => Ok(s),
            }
        };
        specs.push(with_floor(base.clone())?);
        if matches!(kind, StrategyKind::CvarN | StrategyKind::CvarM) {
            for &tau in taus {
                specs.push(with_floor(base.clone().with_bl(tau, source)?)?);
            }
        }
    }
    specs.sort_by_key(StrategySpec::sort_key);
    specs.dedup_by(|a, b| a.sort_key() == b.sort_key());
    Ok(specs)
}

pub struct BacktestArgs<'a> {
    pub returns: &'a Path,
    pub caps: &'a Path,
    pub strategies: &'a [StrategyKind],
    pub floor: Option<FloorRule>,
    pub start: Option<usize>,
}

fn metric_headers(alpha: f64) -> Vec<String> {
    let pct = format!("{}% CVaR", alpha * 100.0);
    vec![
        "strategy".into(),
        "Avg".into(),
        "StDev".into(),
        pct.clone(),
        "Avg/StDev".into(),
        format!("Avg/{pct}"),
    ]
}

pub fn backtest(args: &BacktestArgs, cfg: &RunConfig) -> Result<()> {
    let data = load_market_data(args.returns, args.caps)?;
    let h = cfg.horizon;
    let start = args.start.unwrap_or(h);
    let specs = strategy_specs(args.strategies, &cfg.taus, args.floor, cfg.market_source, cfg)?;
    let reports = rolling_backtest_many(&data, &specs, h, start..data.periods())?;
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let m = &r.metrics;
            vec![r.strategy.clone(), fmt2(m.avg), fmt2_opt(m.stdev), fmt2(m.cvar), fmt2_opt(m.avg_over_stdev), fmt2_opt(m.avg_over_cvar)]
        })
        .collect();
    println!("{} evaluation periods, window H = {h}", data.periods() - start);
    print!("{}", render_table(&metric_headers(cfg.alpha.value()), &rows));
    for r in reports.iter().filter(|r| r.unconverged > 0) {
        warn!("{}: solver hit its iteration cap in {} periods", r.strategy, r.unconverged);
    }
    let mut head = vec!["date".to_string()];
    head.extend(reports.iter().map(|r| r.strategy.clone()));
    let series: Vec<Vec<String>> = (0..reports[0].returns.len())
        .map(|k| {
            let mut row = vec![reports[0].dates[k].clone()];
            row.extend(reports.iter().map(|r| full(r.returns[k])));
            row
        })
        .collect();
    let returns_out = cfg.out_dir.join("backtest_returns.csv");
    write_csv(&returns_out, &head, &series)?;
    let metrics_rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let m = &r.metrics;
            vec![
                r.strategy.clone(),
                full(m.avg),
                full_opt(m.stdev),
                full(m.cvar),
                full_opt(m.avg_over_stdev),
                full_opt(m.avg_over_cvar),
                r.unconverged.to_string(),
            ]
        })
        .collect();
    let metrics_out = cfg.out_dir.join("backtest_metrics.csv");
    write_csv(
        &metrics_out,
        &headers(&["strategy", "avg", "stdev", "cvar", "avg_over_stdev", "avg_over_cvar", "unconverged"]),
        &metrics_rows,
    )?;
    println!("per-period returns written to {}, metrics to {}", returns_out.display(), metrics_out.display());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Study {
    TrueDist,
    Replication,
}

pub struct SimulateArgs<'a> {
    pub model: &'a Path,
    pub study: Study,
    pub reps: usize,
    pub train: usize,
    pub strategies: &'a [StrategyKind],
    pub floor: Option<FloorRule>,
}

fn display_name(name: &str) -> String {
    match name.strip_prefix("LstM") {
        Some(rest) => format!("Market{rest}"),
        None => name.to_string(),
    }
}

pub fn simulate(args: &SimulateArgs, cfg: &RunConfig) -> Result<PathBuf> {
    let truth = load_model(args.model).with_context(|| format!("loading model {}", args.model.display()))?;
    let specs = strategy_specs(args.strategies, &cfg.taus, args.floor, MarketSource::Average, cfg)?;
    let a = cfg.alpha.value();
    let out = match args.study {
        Study::TrueDist => {
            let rows = true_distribution_study(&truth, cfg.alpha, &specs)?;
            let table: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    vec![display_name(&r.strategy), fmt2(r.avg), fmt2(r.stdev), fmt2(r.cvar), fmt2(r.avg / r.stdev), fmt2(r.avg / r.cvar)]
                })
                .collect();
            println!("population statistics under the model (market = equal weights)");
            print!("{}", render_table(&metric_headers(a), &table));
            let csv_rows: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    let mut row = vec![display_name(&r.strategy), full(r.avg), full(r.stdev), full(r.cvar)];
                    row.extend(r.x.as_slice().iter().map(|w| full(*w)));
                    row
                })
                .collect();
            let mut head = headers(&["strategy", "avg", "stdev", "cvar"]);
            head.extend(asset_labels(truth.dim()).into_iter().map(|l| format!("w_{l}")));
            let out = cfg.out_dir.join("simulate_true_dist.csv");
            write_csv(&out, &head, &csv_rows)?;
            out
        }
        Study::Replication => {
            let rc = ReplicationConfig::new(args.reps, args.train, cfg.seed);
            let rows = replication_study(&truth, &rc, &specs)?;
            let mut head = headers(&["strategy", "Avg", "StDev"]);
            head.extend(rc.levels.iter().map(|l| format!("{}% CVaR", l * 100.0)));
            head.extend(headers(&["Avg/StDev", "Avg/1st CVaR", "failed"]));
            let table: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    let mut row = vec![display_name(&r.strategy), fmt2(r.avg), fmt2_opt(r.stdev)];
                    row.extend(r.cvar.iter().map(|(_, v)| fmt2(*v)));
                    row.push(fmt2_opt(r.stdev.filter(|s| *s > 0.0).map(|s| r.avg / s)));
                    row.push(fmt2(r.avg / r.cvar[0].1));
                    row.push(r.failures.to_string());
                    row
                })
                .collect();
            println!("{} replications, {} training draws each, seed {}", args.reps, args.train, cfg.seed);
            print!("{}", render_table(&head, &table));
            for r in rows.iter().filter(|r| r.failures > 0) {
                warn!("{}: {} of {} replications failed and were excluded", r.strategy, r.failures, args.reps);
            }
            let mut csv_head = headers(&["strategy", "avg", "stdev"]);
            csv_head.extend(rc.levels.iter().map(|l| format!("cvar_{l}")));
            csv_head.extend(headers(&["successes", "failures", "unconverged"]));
            let csv_rows: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    let mut row = vec![display_name(&r.strategy), full(r.avg), full_opt(r.stdev)];
                    row.extend(r.cvar.iter().map(|(_, v)| full(*v)));
                    row.extend([r.successes.to_string(), r.failures.to_string(), r.unconverged.to_string()]);
                    row
                })
                .collect();
            let out = cfg.out_dir.join("simulate_replication.csv");
            write_csv(&out, &csv_head, &csv_rows)?;
            out
        }
    };
    println!("table written to {}", out.display());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floors_parse() {
        assert_eq!(parse_floor("1.2").unwrap(), FloorRule::Level(1.2));
        assert_eq!(parse_floor("market").unwrap(), FloorRule::MarketMultiple(1.0));
        assert_eq!(parse_floor("1.05*market").unwrap(), FloorRule::MarketMultiple(1.05));
        assert_eq!(parse_floor("market*1.05").unwrap(), FloorRule::MarketMultiple(1.05));
        assert!(parse_floor("lots").is_err());
    }

    #[test]
    fn strategies_parse_and_sort() {
        let kinds = parse_strategies("CVaR_M, market,StDev").unwrap();
        let cfg = RunConfig::resolve(&Default::default(), None, None).unwrap();
        let specs = strategy_specs(&kinds, &[1.0, 0.25], None, MarketSource::Average, &cfg).unwrap();
        let names: Vec<String> = specs.iter().map(|s| s.name()).collect();
        assert_eq!(names, vec!["LstM", "StDev", "CVaR_M", "CVaR_M(tau=0.25)", "CVaR_M(tau=1)"]);
        assert!(parse_strategies("bogus").is_err());
        assert!(parse_strategies(" , ").is_err());
    }

    #[test]
    fn market_names() {
        assert_eq!(display_name("LstM"), "Market");
        assert_eq!(display_name("CVaR_M(tau=1)"), "CVaR_M(tau=1)");
    }
}
