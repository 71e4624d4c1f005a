//! Python bindings for `mixcvar`.
//!
//! Vectors and matrices cross the boundary as Python lists (matrices as lists
//! of rows). Library errors are raised as `ValueError`.

use mixcvar::backtest::{
    rolling_backtest_many, true_distribution_study, MarketData, MarketSource, StrategyKind, StrategySpec,
};
use mixcvar::bl::{adjusted_mu_mixture, adjusted_mu_normal, equilibrium_target_mixture, equilibrium_target_normal};
use mixcvar::fit::{fit_mixture_em, EmConfig};
use mixcvar::optimize::{
    min_cvar_mixture_approx, min_cvar_mixture_exact, min_cvar_normal, min_stdev, ExpectedReturnFloor, SolveConfig,
    SolveResult,
};
use mixcvar::risk::evaluate;
use mixcvar::{MixtureModel, Portfolio, Probability};
use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(err("matrix rows must all have the same length"));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn alpha(value: f64) -> PyResult<Probability> {
    Probability::new(value).map_err(err)
}

/// Gaussian mixture return model.
#[pyclass(name = "MixtureModel", module = "mixcvar_py", frozen)]
struct PyMixture {
    inner: MixtureModel,
}

#[pymethods]
impl PyMixture {
    #[new]
    fn new(rho: Vec<f64>, means: Vec<Vec<f64>>, covariances: Vec<Vec<Vec<f64>>>) -> PyResult<Self> {
        let means = means.into_iter().map(DVector::from_vec).collect();
        let covariances = covariances.iter().map(|c| matrix(c)).collect::<PyResult<Vec<_>>>()?;
        Ok(Self { inner: MixtureModel::new(rho, means, covariances).map_err(err)? })
    }

    /// Single-component model.
    #[staticmethod]
    fn normal(mean: Vec<f64>, covariance: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(Self { inner: MixtureModel::normal(DVector::from_vec(mean), matrix(&covariance)?).map_err(err)? })
    }

    /// Model with diagonal covariances given by per-asset standard deviations.
    #[staticmethod]
    fn diagonal(rho: Vec<f64>, means: Vec<Vec<f64>>, sds: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(Self { inner: MixtureModel::diagonal(rho, means, sds).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: mixcvar::data::load_model(path.as_ref()).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        mixcvar::data::save_model(&self.inner, path.as_ref()).map_err(err)
    }

    #[getter]
    fn rho(&self) -> Vec<f64> {
        self.inner.rho().to_vec()
    }

    #[getter]
    fn means(&self) -> Vec<Vec<f64>> {
        self.inner.means().iter().map(|m| m.as_slice().to_vec()).collect()
    }

    #[getter]
    fn covariances(&self) -> Vec<Vec<Vec<f64>>> {
        self.inner.covariances().iter().map(rows).collect()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn components(&self) -> usize {
        self.inner.components()
    }

    /// Pooled mean and covariance.
    fn moments(&self) -> (Vec<f64>, Vec<Vec<f64>>) {
        let (mu, sigma) = self.inner.moments();
        (mu.as_slice().to_vec(), rows(&sigma))
    }

    /// `count` draws (rows) from a seeded stream.
    fn sample(&self, count: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.sample_seeded(count, seed).map_err(err)?))
    }

    fn __repr__(&self) -> String {
        format!("MixtureModel(components={}, dim={}, rho={:?})", self.inner.components(), self.inner.dim(), self.inner.rho())
    }
}

/// EM fit of a mixture to the rows of `returns`; returns `(model, log_likelihood)`.
#[pyfunction]
#[pyo3(signature = (returns, components = 2, restarts = 4, seed = 0))]
fn fit_em(returns: Vec<Vec<f64>>, components: usize, restarts: usize, seed: u64) -> PyResult<(PyMixture, f64)> {
    let cfg = EmConfig { components, restarts, seed, ..EmConfig::default() };
    let report = fit_mixture_em(&matrix(&returns)?, &cfg).map_err(err)?;
    Ok((PyMixture { inner: report.model }, report.log_likelihood))
}

/// VaR, CVaR and their closed-form bounds for portfolio `weights`.
#[pyfunction]
#[pyo3(signature = (model, weights, alpha = 0.01))]
fn risk<'py>(py: Python<'py>, model: &PyMixture, weights: Vec<f64>, alpha: f64) -> PyResult<Bound<'py, PyDict>> {
    let x = Portfolio::new(weights).map_err(err)?;
    let pm = model.inner.project(&x).map_err(err)?;
    let r = evaluate(&pm, self::alpha(alpha)?).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("mean", pm.mean())?;
    d.set_item("stdev", pm.variance().sqrt())?;
    d.set_item("var", r.var)?;
    d.set_item("cvar", r.cvar)?;
    d.set_item("var_lower", r.var_lower)?;
    d.set_item("var_upper", r.var_upper)?;
    d.set_item("cvar_lower", r.cvar_lower)?;
    d.set_item("cvar_upper", r.cvar_upper)?;
    d.set_item("kappa", r.kappa)?;
    Ok(d)
}

fn solve_dict<'py>(py: Python<'py>, r: SolveResult) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("weights", r.x.as_slice().to_vec())?;
    d.set_item("objective", r.objective)?;
    d.set_item("var", r.var)?;
    d.set_item("converged", r.converged)?;
    d.set_item("iterations", r.iterations)?;
    Ok(d)
}

/// Long-only minimization of `method`: `stdev`, `cvar_normal`, `cvar_mixture`
/// or `cvar_mixture_approx`. `floor` is a minimum expected return.
#[pyfunction]
#[pyo3(signature = (model, method = "cvar_mixture", alpha = 0.01, floor = None))]
fn optimize<'py>(
    py: Python<'py>,
    model: &PyMixture,
    method: &str,
    alpha: f64,
    floor: Option<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let a = self::alpha(alpha)?;
    let cfg = SolveConfig::default();
    let (mu, sigma) = model.inner.moments();
    let floor = floor.map(|level| ExpectedReturnFloor::new(mu.clone(), level)).transpose().map_err(err)?;
    let result = match method {
        "stdev" => min_stdev(&sigma, &cfg, floor.as_ref()),
        "cvar_normal" => min_cvar_normal(&mu, &sigma, a, &cfg, floor.as_ref()),
        "cvar_mixture" => min_cvar_mixture_exact(&model.inner, a, &cfg, floor.as_ref()),
        "cvar_mixture_approx" => min_cvar_mixture_approx(&model.inner, a, &cfg, floor.as_ref()),
        other => return Err(err(format!("unknown method `{other}`"))),
    }
    .map_err(err)?;
    solve_dict(py, result)
}

/// Inverse-optimization adjustment toward the market portfolio followed by
/// re-optimization. `pipeline` is `normal` or `mixture`.
#[pyfunction]
#[pyo3(signature = (model, market, tau, pipeline = "mixture", alpha = 0.01))]
fn black_litterman<'py>(
    py: Python<'py>,
    model: &PyMixture,
    market: Vec<f64>,
    tau: f64,
    pipeline: &str,
    alpha: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let a = self::alpha(alpha)?;
    let xm = Portfolio::new(market).map_err(err)?;
    let cfg = SolveConfig::default();
    let mix = &model.inner;
    let (mu, sigma) = mix.moments();
    let d = PyDict::new(py);
    let result = match pipeline {
        "normal" => {
            let target = equilibrium_target_normal(&sigma, &xm, a).map_err(err)?;
            let (adjusted, lambda) = adjusted_mu_normal(&target, &mu, &sigma, tau).map_err(err)?;
            d.set_item("means", vec![adjusted.as_slice().to_vec()])?;
            d.set_item("lambda", lambda)?;
            min_cvar_normal(&adjusted, &sigma, a, &cfg, None)
        }
        "mixture" => {
            let target = equilibrium_target_mixture(mix, &xm, a).map_err(err)?;
            let (means, lambda) =
                adjusted_mu_mixture(&target, mix.means(), &sigma, mix.covariances(), tau).map_err(err)?;
            d.set_item("means", means.iter().map(|m| m.as_slice().to_vec()).collect::<Vec<_>>())?;
            d.set_item("lambda", lambda)?;
            min_cvar_mixture_exact(&mix.with_means(means).map_err(err)?, a, &cfg, None)
        }
        other => return Err(err(format!("unknown pipeline `{other}`"))),
    }
    .map_err(err)?;
    d.set_item("weights", result.x.as_slice().to_vec())?;
    d.set_item("converged", result.converged)?;
    Ok(d)
}

fn specs(names: &[String], alpha: Probability, taus: &[f64]) -> PyResult<Vec<StrategySpec>> {
    let mut out = Vec::new();
    for name in names {
        let kind: StrategyKind = name.parse().map_err(err)?;
        out.push(StrategySpec::new(kind, alpha));
        if matches!(kind, StrategyKind::CvarN | StrategyKind::CvarM) {
            for &tau in taus {
                out.push(StrategySpec::new(kind, alpha).with_bl(tau, MarketSource::Average).map_err(err)?);
            }
        }
    }
    Ok(out)
}

/// Rolling backtest with window `horizon`; returns one dict per strategy with
/// the per-period returns and summary metrics.
#[pyfunction]
#[pyo3(signature = (returns, caps, horizon, strategies, alpha = 0.01, taus = Vec::new()))]
fn backtest<'py>(
    py: Python<'py>,
    returns: Vec<Vec<f64>>,
    caps: Vec<Vec<f64>>,
    horizon: usize,
    strategies: Vec<String>,
    alpha: f64,
    taus: Vec<f64>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let returns = matrix(&returns)?;
    let (t, n) = returns.shape();
    let labels = (1..=n).map(|j| format!("a{j}")).collect();
    let dates = (0..t).map(|k| k.to_string()).collect();
    let data = MarketData::new(returns, matrix(&caps)?, labels, dates).map_err(err)?;
    let specs = specs(&strategies, self::alpha(alpha)?, &taus)?;
    let reports = py.detach(|| rolling_backtest_many(&data, &specs, horizon, horizon..t)).map_err(err)?;
    reports
        .into_iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("strategy", r.strategy)?;
            d.set_item("returns", r.returns)?;
            d.set_item("avg", r.metrics.avg)?;
            d.set_item("stdev", r.metrics.stdev)?;
            d.set_item("cvar", r.metrics.cvar)?;
            d.set_item("unconverged", r.unconverged)?;
            Ok(d)
        })
        .collect()
}

/// Population statistics of each strategy's portfolio under a known model.
#[pyfunction]
#[pyo3(signature = (model, strategies, alpha = 0.01, taus = Vec::new()))]
fn true_distribution<'py>(
    py: Python<'py>,
    model: &PyMixture,
    strategies: Vec<String>,
    alpha: f64,
    taus: Vec<f64>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let a = self::alpha(alpha)?;
    let rows = true_distribution_study(&model.inner, a, &specs(&strategies, a, &taus)?).map_err(err)?;
    rows.into_iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("strategy", r.strategy)?;
            d.set_item("weights", r.x.as_slice().to_vec())?;
            d.set_item("avg", r.avg)?;
            d.set_item("stdev", r.stdev)?;
            d.set_item("cvar", r.cvar)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn mixcvar_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMixture>()?;
    m.add_function(wrap_pyfunction!(fit_em, m)?)?;
    m.add_function(wrap_pyfunction!(risk, m)?)?;
    m.add_function(wrap_pyfunction!(optimize, m)?)?;
    m.add_function(wrap_pyfunction!(black_litterman, m)?)?;
    m.add_function(wrap_pyfunction!(backtest, m)?)?;
    m.add_function(wrap_pyfunction!(true_distribution, m)?)?;
    Ok(())
}
