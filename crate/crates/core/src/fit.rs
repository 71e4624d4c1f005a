//! Sample moments and EM fitting of Gaussian mixtures.
//!
//! Covariances use the maximum-likelihood `1/T` normalization everywhere, so
//! an `m = 1` EM fit is exactly [`sample_moments`] plus the ridge.
//!
//! The EM loop runs full-covariance updates from several starting points and
//! keeps the best likelihood. The first `⌈restarts/2⌉` starts are seeded
//! k-means++ style (hard assignment to the nearest of `m` spread-out data
//! points); the rest start from random soft responsibilities. A start is
//! abandoned as degenerate when a component's effective count drops below
//! `n + 1`. The returned components are sorted by their equal-weight mean
//! `μ_i^T e / n`, ascending, so component 1 is the low-return regime.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{symmetrize, MixtureModel};
use crate::rng::{stream_rng, STREAM_EM};

const DEFAULT_RIDGE_SCALE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    pub components: usize,
    pub max_iters: usize,
    /// Stop when the relative log-likelihood change falls below this.
    pub ll_tolerance: f64,
    pub restarts: usize,
    /// Added to every M-step covariance diagonal; `None` means
    /// `1e-8 · trace(Σ̂) / n` of the pooled sample covariance.
    pub ridge: Option<f64>,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { components: 2, max_iters: 500, ll_tolerance: 1e-8, restarts: 4, ridge: None, seed: 0 }
    }
}

impl EmConfig {
    pub fn with_components(components: usize) -> Self {
        Self { components, ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        if self.components == 0 {
            return Err(Error::InvalidArgument("EM needs at least one component".into()));
        }
        if self.max_iters == 0 || self.restarts == 0 {
            return Err(Error::InvalidArgument("max_iters and restarts must be positive".into()));
        }
        if !(self.ll_tolerance > 0.0) {
            return Err(Error::InvalidArgument("ll_tolerance must be positive".into()));
        }
        if let Some(r) = self.ridge {
            if !(r >= 0.0 && r.is_finite()) {
                return Err(Error::InvalidArgument(format!("ridge {r} must be finite and nonnegative")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub model: MixtureModel,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    pub restart_index: usize,
    /// Log-likelihood after every E-step of the winning start.
    pub ll_trace: Vec<f64>,
    pub degenerate_restarts: usize,
}

/// Mean and `1/T` covariance of the rows of `returns` (T × n).
pub fn sample_moments(returns: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let t = returns.nrows();
    if t < 2 {
        return Err(Error::InvalidArgument(format!("sample moments need at least 2 rows, got {t}")));
    }
    let mean = returns.row_mean().transpose();
    let mut centered = returns.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut cov = centered.transpose() * &centered / t as f64;
    symmetrize(&mut cov);
    Ok((mean, cov))
}

/// `Σ_t log Σ_i ρ_i N(r_t; μ_i, Σ_i)` computed with log-sum-exp.
pub fn log_likelihood(model: &MixtureModel, returns: &DMatrix<f64>) -> Result<f64> {
    if returns.ncols() != model.dim() {
        return Err(Error::Dimension(format!(
            "returns have {} columns, model has {} assets",
            returns.ncols(),
            model.dim()
        )));
    }
    let xt = returns.transpose();
    let mut logp = DMatrix::zeros(returns.nrows(), model.components());
    for i in 0..model.components() {
        let chol = Cholesky::new(model.covariances()[i].clone()).ok_or_else(|| {
            Error::Singular(format!("covariance of component {i} is not positive definite"))
        })?;
        let col = log_density(&xt, &model.means()[i], &chol);
        logp.column_mut(i).copy_from(&(col.add_scalar(model.rho()[i].ln())));
    }
    Ok(logsumexp_rows(&mut logp))
}

/// `log N(x_t; μ, Σ)` for every column `x_t` of `xt`.
fn log_density(xt: &DMatrix<f64>, mu: &DVector<f64>, chol: &Cholesky<f64, Dyn>) -> DVector<f64> {
    let n = xt.nrows();
    let mut d = xt.clone();
    for mut col in d.column_iter_mut() {
        col -= mu;
    }
    let l = chol.l_dirty();
    l.solve_lower_triangular_mut(&mut d);
    let logdet: f64 = 2.0 * (0..n).map(|j| l[(j, j)].ln()).sum::<f64>();
    let konst = -0.5 * (n as f64 * (2.0 * PI).ln() + logdet);
    DVector::from_iterator(d.ncols(), d.column_iter().map(|c| konst - 0.5 * c.norm_squared()))
}

/// Replace each row of `logp` by normalized probabilities; return the sum of row log-normalizers.
fn logsumexp_rows(logp: &mut DMatrix<f64>) -> f64 {
    let mut total = 0.0;
    for mut row in logp.row_iter_mut() {
        let max = row.max();
        let s: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + s.ln();
        row.apply(|v| *v = (*v - lse).exp());
        total += lse;
    }
    total
}

/// Fit an m-component mixture to the rows of `returns` by EM.
pub fn fit_mixture_em(returns: &DMatrix<f64>, cfg: &EmConfig) -> Result<FitReport> {
    cfg.validate()?;
    let (t, n) = returns.shape();
    let m = cfg.components;
    if t < m * (n + 1) || t < 2 {
        return Err(Error::InvalidArgument(format!(
            "{t} observations are too few for {m} components in {n} dimensions (need {})",
            (m * (n + 1)).max(2)
        )));
    }
    if returns.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("returns contain non-finite values".into()));
    }
    let ridge = match cfg.ridge {
        Some(r) => r,
        None => {
            let (_, pooled) = sample_moments(returns)?;
            DEFAULT_RIDGE_SCALE * pooled.trace() / n as f64
        }
    };
    let xt = returns.transpose();
    let kmeans_starts = cfg.restarts.div_ceil(2);

    let mut best: Option<Run> = None;
    let mut best_index = 0;
    let mut degenerate = 0;
    for k in 0..cfg.restarts {
        let mut rng = stream_rng(cfg.seed, STREAM_EM + k as u64);
        let resp = if m == 1 {
            DMatrix::from_element(t, 1, 1.0)
        } else if k < kmeans_starts {
            kmeans_pp_responsibilities(&xt, m, &mut rng)
        } else {
            random_responsibilities(t, m, &mut rng)
        };
        match run_em(&xt, resp, ridge, cfg) {
            Some(run) => {
                if best.as_ref().is_none_or(|b| run.ll > b.ll) {
                    best = Some(run);
                    best_index = k;
                }
            }
            None => {
                log::debug!("EM start {k} degenerated");
                degenerate += 1;
            }
        }
    }
    let run = best.ok_or_else(|| Error::EmFailed(format!("all {} starts degenerated", cfg.restarts)))?;

    let mut order: Vec<usize> = (0..m).collect();
    let key = |i: usize| run.mu[i].sum() / n as f64;
    order.sort_by(|a, b| key(*a).total_cmp(&key(*b)));
    let model = MixtureModel::new(
        order.iter().map(|i| run.rho[*i]).collect(),
        order.iter().map(|i| run.mu[*i].clone()).collect(),
        order.iter().map(|i| run.sigma[*i].clone()).collect(),
    )?;
    Ok(FitReport {
        model,
        log_likelihood: run.ll,
        iterations: run.iterations,
        converged: run.converged,
        restart_index: best_index,
        ll_trace: run.trace,
        degenerate_restarts: degenerate,
    })
}

struct Run {
    rho: Vec<f64>,
    mu: Vec<DVector<f64>>,
    sigma: Vec<DMatrix<f64>>,
    ll: f64,
    iterations: usize,
    converged: bool,
    trace: Vec<f64>,
}

struct Params {
    rho: Vec<f64>,
    mu: Vec<DVector<f64>>,
    sigma: Vec<DMatrix<f64>>,
}

/// One EM run from initial responsibilities; `None` when it degenerates.
fn run_em(xt: &DMatrix<f64>, mut resp: DMatrix<f64>, ridge: f64, cfg: &EmConfig) -> Option<Run> {
    let mut trace = Vec::new();
    let mut params = m_step(xt, &resp, ridge)?;
    let mut prev = f64::NEG_INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let (ll, next) = e_step(xt, &params)?;
        trace.push(ll);
        resp = next;
        if (ll - prev).abs() <= cfg.ll_tolerance * ll.abs().max(1.0) {
            converged = true;
            break;
        }
        prev = ll;
        params = m_step(xt, &resp, ridge)?;
    }
    Some(Run {
        rho: params.rho,
        mu: params.mu,
        sigma: params.sigma,
        ll: *trace.last()?,
        iterations,
        converged,
        trace,
    })
}

fn e_step(xt: &DMatrix<f64>, p: &Params) -> Option<(f64, DMatrix<f64>)> {
    let t = xt.ncols();
    let m = p.rho.len();
    let mut logp = DMatrix::zeros(t, m);
    for i in 0..m {
        let chol = Cholesky::new(p.sigma[i].clone())?;
        let col = log_density(xt, &p.mu[i], &chol).add_scalar(p.rho[i].ln());
        logp.column_mut(i).copy_from(&col);
    }
    let ll = logsumexp_rows(&mut logp);
    ll.is_finite().then_some((ll, logp))
}

fn m_step(xt: &DMatrix<f64>, resp: &DMatrix<f64>, ridge: f64) -> Option<Params> {
    let (n, t) = xt.shape();
    let m = resp.ncols();
    let mut rho = Vec::with_capacity(m);
    let mut mu = Vec::with_capacity(m);
    let mut sigma = Vec::with_capacity(m);
    for i in 0..m {
        let w = resp.column(i);
        let count = w.sum();
        if count < (n + 1) as f64 {
            return None;
        }
        let mean = xt * w / count;
        let mut d = xt.clone();
        for (j, mut col) in d.column_iter_mut().enumerate() {
            col -= &mean;
            col *= w[j].sqrt();
        }
        let mut cov = &d * d.transpose() / count;
        for j in 0..n {
            cov[(j, j)] += ridge;
        }
        symmetrize(&mut cov);
        rho.push(count / t as f64);
        mu.push(mean);
        sigma.push(cov);
    }
    let total: f64 = rho.iter().sum();
    rho.iter_mut().for_each(|r| *r /= total);
    Some(Params { rho, mu, sigma })
}

/// Hard assignment to the nearest of `m` centers chosen k-means++ style.
fn kmeans_pp_responsibilities<R: Rng + ?Sized>(xt: &DMatrix<f64>, m: usize, rng: &mut R) -> DMatrix<f64> {
    let t = xt.ncols();
    let mut centers = vec![rng.random_range(0..t)];
    let mut dist: Vec<f64> = (0..t).map(|j| (xt.column(j) - xt.column(centers[0])).norm_squared()).collect();
    while centers.len() < m {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = t - 1;
            for (j, d) in dist.iter().enumerate() {
                if u < *d {
                    pick = j;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            rng.random_range(0..t)
        };
        centers.push(next);
        for (j, d) in dist.iter_mut().enumerate() {
            *d = d.min((xt.column(j) - xt.column(next)).norm_squared());
        }
    }
    let mut resp = DMatrix::zeros(t, m);
    for j in 0..t {
        let nearest = (0..m)
            .min_by(|a, b| {
                let da = (xt.column(j) - xt.column(centers[*a])).norm_squared();
                let db = (xt.column(j) - xt.column(centers[*b])).norm_squared();
                da.total_cmp(&db)
            })
            .unwrap_or(0);
        resp[(j, nearest)] = 1.0;
    }
    resp
}

fn random_responsibilities<R: Rng + ?Sized>(t: usize, m: usize, rng: &mut R) -> DMatrix<f64> {
    let mut resp = DMatrix::from_fn(t, m, |_, _| rng.random::<f64>() + 1e-3);
    for mut row in resp.row_iter_mut() {
        let s = row.sum();
        row /= s;
    }
    resp
}
