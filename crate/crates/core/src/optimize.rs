//! Long-only risk minimization over the unit simplex.
//!
//! Every problem is solved by the same monotone projected-gradient method:
//! a Barzilai-Borwein trial step followed by Armijo backtracking along the
//! projection arc `s ↦ P(x - s ∇f(x))`, started from the equal-weight
//! portfolio. The method stops when the fixed-point residual
//! `‖x - P(x - ∇f(x))‖` falls below `grad_tolerance`, which is zero exactly
//! at the minimizers of a convex objective over the feasible set.
//!
//! Objectives:
//!
//! * [`min_stdev`]: `x^T Σ x` (same argmin as the standard deviation; the
//!   reported objective is the standard deviation itself).
//! * [`min_cvar_normal`]: `-μ^T x + z(α) √(x^T Σ x)`.
//! * [`min_cvar_mixture_exact`]: the exact mixture CVaR. Each evaluation
//!   computes `c(x) = VaR_α(x)` and differentiates the one-dimensional CVaR
//!   objective at fixed `c`, which is the gradient of the CVaR itself because
//!   `c(x)` minimizes that objective:
//!   `∇ = (1/α) Σ ρ_i [ -Φ(u_i) μ_i + φ(u_i) Σ_i x / σ_i ]`, `u_i = (-c - ν_i)/σ_i`.
//! * [`min_cvar_mixture_approx`]: the additive over-approximation
//!   `Σ_i ( -μ_i^T x + z(α/ρ_i) √(x^T Σ_i x) )`.
//!
//! An optional floor `μ̂^T x >= μ_0` restricts the feasible set. The
//! projection onto `Δ_n ∩ {μ̂^T x >= μ_0}` is `P_Δ(v + λ μ̂)` for the smallest
//! `λ >= 0` that makes it feasible; `λ` is found by bisection since
//! `λ ↦ μ̂^T P_Δ(v + λ μ̂)` is nondecreasing.
//!
//! Where several portfolios are optimal (duplicated assets, for instance)
//! the solver returns whichever one the deterministic iteration reaches.

use nalgebra::{DMatrix, DVector};

use crate::distn::{normal_cdf, normal_pdf, z_level, Probability};
use crate::error::{Error, Result};
use crate::model::{quad_form, MixtureModel, Portfolio};
use crate::risk::{objective_at, var_mixture};

/// Variances below this are treated as zero when differentiating `√(x^T Σ x)`.
const VARIANCE_FLOOR: f64 = 1e-300;
const MAX_BACKTRACKS: usize = 80;
/// Objective changes within this many ulps of `|f|` count as no increase.
const ROUNDOFF_SLACK: f64 = 64.0;
const FLOOR_BISECTION_ITERS: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct SolveConfig {
    /// Stop when `‖x - P(x - ∇f(x))‖ <= grad_tolerance`.
    pub grad_tolerance: f64,
    pub max_iters: usize,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    /// Step shrink factor during backtracking.
    pub backtrack: f64,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self { grad_tolerance: 1e-7, max_iters: 5000, armijo: 1e-4, backtrack: 0.5 }
    }
}

impl SolveConfig {
    fn validate(&self) -> Result<()> {
        if !(self.grad_tolerance > 0.0) || self.max_iters == 0 {
            return Err(Error::InvalidArgument("grad_tolerance and max_iters must be positive".into()));
        }
        if !(self.armijo > 0.0 && self.armijo < 1.0 && self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(Error::InvalidArgument("armijo and backtrack must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// The constraint `mean^T x >= level`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedReturnFloor {
    pub mean: DVector<f64>,
    pub level: f64,
}

impl ExpectedReturnFloor {
    pub fn new(mean: DVector<f64>, level: f64) -> Result<Self> {
        let max = mean.max();
        if mean.is_empty() || !level.is_finite() {
            return Err(Error::InvalidArgument("floor needs a mean vector and a finite level".into()));
        }
        if level > max {
            return Err(Error::InfeasibleFloor { floor: level, max });
        }
        Ok(Self { mean, level })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub x: Portfolio,
    pub objective: f64,
    /// `VaR_α` at the solution (the optimal `c`) for the exact mixture problem.
    pub var: Option<f64>,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Euclidean projection onto the unit simplex (sort and threshold).
pub fn project_simplex(v: &DVector<f64>) -> Portfolio {
    Portfolio::from_simplex_point(simplex_projection(v))
}

fn simplex_projection(v: &DVector<f64>) -> DVector<f64> {
    let mut u: Vec<f64> = v.iter().cloned().collect();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, uj) in u.iter().enumerate() {
        cumsum += uj;
        let t = (cumsum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    v.map(|vi| (vi - theta).max(0.0))
}

enum Feasible<'a> {
    Simplex,
    Floor(&'a ExpectedReturnFloor),
}

impl Feasible<'_> {
    fn new(floor: Option<&ExpectedReturnFloor>, n: usize) -> Result<Feasible<'_>> {
        match floor {
            None => Ok(Feasible::Simplex),
            Some(f) if f.mean.len() != n => Err(Error::Dimension(format!(
                "floor mean has length {}, problem has {n} assets",
                f.mean.len()
            ))),
            Some(f) => {
                let max = f.mean.max();
                if f.level > max {
                    Err(Error::InfeasibleFloor { floor: f.level, max })
                } else {
                    Ok(Feasible::Floor(f))
                }
            }
        }
    }

    fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Feasible::Simplex => simplex_projection(v),
            Feasible::Floor(f) => project_floor(v, &f.mean, f.level),
        }
    }
}

/// Projection onto `Δ_n ∩ {μ^T x >= level}`, assuming the set is nonempty.
fn project_floor(v: &DVector<f64>, mu: &DVector<f64>, level: f64) -> DVector<f64> {
    let base = simplex_projection(v);
    if mu.dot(&base) >= level {
        return base;
    }
    let at = |lambda: f64| simplex_projection(&(v + mu * lambda));
    let scale = 1.0 + v.amax() + mu.amax();
    let spread = (mu.max() - mu.min()).max(f64::MIN_POSITIVE);
    let mut hi = scale / spread;
    let mut x_hi = at(hi);
    let mut doublings = 0;
    while mu.dot(&x_hi) < level && doublings < 200 {
        hi *= 2.0;
        x_hi = at(hi);
        doublings += 1;
    }
    let mut lo = 0.0;
    for _ in 0..FLOOR_BISECTION_ITERS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let x_mid = at(mid);
        if mu.dot(&x_mid) >= level {
            hi = mid;
            x_hi = x_mid;
        } else {
            lo = mid;
        }
    }
    x_hi
}

struct Eval {
    f: f64,
    grad: DVector<f64>,
    var: Option<f64>,
}

struct Raw {
    x: DVector<f64>,
    eval: Eval,
    iterations: usize,
    converged: bool,
    residual: f64,
    /// Objective at every accepted iterate, starting point included.
    #[cfg_attr(not(test), allow(dead_code))]
    trace: Vec<f64>,
}

fn projected_gradient<F>(n: usize, feasible: &Feasible, cfg: &SolveConfig, mut eval: F) -> Result<Raw>
where
    F: FnMut(&DVector<f64>) -> Result<Eval>,
{
    cfg.validate()?;
    let mut x = feasible.project(&DVector::from_element(n, 1.0 / n as f64));
    let mut cur = eval(&x)?;
    let mut trace = vec![cur.f];
    let mut step = 1.0 / cur.grad.norm().max(1e-12);
    for iter in 0..cfg.max_iters {
        let residual = (&x - feasible.project(&(&x - &cur.grad))).norm();
        if residual <= cfg.grad_tolerance {
            return Ok(Raw { x, eval: cur, iterations: iter, converged: true, residual, trace });
        }
        let mut s = step;
        let mut accepted = None;
        let noise = ROUNDOFF_SLACK * f64::EPSILON * cur.f.abs().max(1.0);
        for _ in 0..MAX_BACKTRACKS {
            let y = feasible.project(&(&x - &cur.grad * s));
            let d = &y - &x;
            if d.norm() == 0.0 {
                break;
            }
            let trial = eval(&y)?;
            if trial.f <= cur.f + cfg.armijo * cur.grad.dot(&d) + noise {
                accepted = Some((y, trial));
                break;
            }
            s *= cfg.backtrack;
        }
        let Some((y, next)) = accepted else {
            // No decrease available at machine precision.
            return Ok(Raw { x, eval: cur, iterations: iter, converged: false, residual, trace });
        };
        let sk = &y - &x;
        let yk = &next.grad - &cur.grad;
        let sy = sk.dot(&yk);
        step = if sy > 0.0 { (sk.norm_squared() / sy).clamp(1e-12, 1e12) } else { (s * 2.0).min(1e12) };
        x = y;
        cur = next;
        trace.push(cur.f);
    }
    let residual = (&x - feasible.project(&(&x - &cur.grad))).norm();
    let converged = residual <= cfg.grad_tolerance;
    Ok(Raw { x, eval: cur, iterations: cfg.max_iters, converged, residual, trace })
}

fn finish(raw: Raw, objective: impl Fn(f64) -> f64) -> SolveResult {
    SolveResult {
        x: Portfolio::from_simplex_point(raw.x),
        objective: objective(raw.eval.f),
        var: raw.eval.var,
        kkt_residual: raw.residual,
        iterations: raw.iterations,
        converged: raw.converged,
    }
}

fn check_square(sigma: &DMatrix<f64>, n: usize, what: &str) -> Result<()> {
    if sigma.nrows() != n || sigma.ncols() != n {
        return Err(Error::Dimension(format!("{what} is {}x{}, expected {n}x{n}", sigma.nrows(), sigma.ncols())));
    }
    if sigma.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("{what} has non-finite entries")));
    }
    Ok(())
}

fn check_psd(sigma: &DMatrix<f64>) -> Result<()> {
    let eig = sigma.clone().symmetric_eigenvalues();
    let norm = eig.amax();
    if eig.min() < -1e-10 * norm {
        return Err(Error::InvalidArgument(format!("covariance is not PSD (eigenvalue {:e})", eig.min())));
    }
    Ok(())
}

/// `min √(x^T Σ x)` over the simplex (optionally with a floor).
pub fn min_stdev(sigma: &DMatrix<f64>, cfg: &SolveConfig, floor: Option<&ExpectedReturnFloor>) -> Result<SolveResult> {
    let n = sigma.nrows();
    if n == 0 {
        return Err(Error::InvalidArgument("empty covariance".into()));
    }
    check_square(sigma, n, "covariance")?;
    check_psd(sigma)?;
    let feasible = Feasible::new(floor, n)?;
    let raw = projected_gradient(n, &feasible, cfg, |x| {
        let sx = sigma * x;
        Ok(Eval { f: x.dot(&sx), grad: sx * 2.0, var: None })
    })?;
    Ok(finish(raw, |f| f.max(0.0).sqrt()))
}

/// `-μ^T x + z(α) √(x^T Σ x)`.
pub fn cvar_normal_objective(mu: &DVector<f64>, sigma: &DMatrix<f64>, alpha: Probability, x: &DVector<f64>) -> f64 {
    -mu.dot(x) + z_level(alpha.value()) * quad_form(sigma, x).max(0.0).sqrt()
}

/// Minimize the normal CVaR `-μ^T x + z(α) √(x^T Σ x)` over the simplex.
pub fn min_cvar_normal(
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    alpha: Probability,
    cfg: &SolveConfig,
    floor: Option<&ExpectedReturnFloor>,
) -> Result<SolveResult> {
    let n = mu.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty mean vector".into()));
    }
    check_square(sigma, n, "covariance")?;
    check_psd(sigma)?;
    let feasible = Feasible::new(floor, n)?;
    let z = z_level(alpha.value());
    let raw = projected_gradient(n, &feasible, cfg, |x| {
        let sx = sigma * x;
        let var = x.dot(&sx).max(0.0);
        let sd = var.sqrt();
        let mut grad = -mu;
        if var > VARIANCE_FLOOR {
            grad.axpy(z / sd, &sx, 1.0);
        }
        Ok(Eval { f: -mu.dot(x) + z * sd, grad, var: None })
    })?;
    Ok(finish(raw, |f| f))
}

/// Exact mixture CVaR and its gradient at `x`, with `VaR_α(x)`.
fn mixture_exact_eval(mix: &MixtureModel, alpha: Probability, x: &DVector<f64>) -> Result<Eval> {
    let a = alpha.value();
    let pm = mix.project_weights(x)?;
    let c = var_mixture(&pm, alpha)?;
    let f = objective_at(&pm, c, a);
    let mut grad = DVector::zeros(x.len());
    for (i, ((rho, mu), sigma)) in mix.rho().iter().zip(mix.means()).zip(mix.covariances()).enumerate() {
        let (nu, sd) = (pm.nu[i], pm.sd[i]);
        if sd > 0.0 {
            let u = (-c - nu) / sd;
            grad.axpy(-rho * normal_cdf(u) / a, mu, 1.0);
            grad += sigma * x * (rho * normal_pdf(u) / (a * sd));
        } else if c + nu < 0.0 {
            grad.axpy(-rho / a, mu, 1.0);
        }
    }
    Ok(Eval { f, grad, var: Some(c) })
}

/// Minimize the exact mixture CVaR over the simplex (optionally with a floor).
pub fn min_cvar_mixture_exact(
    mix: &MixtureModel,
    alpha: Probability,
    cfg: &SolveConfig,
    floor: Option<&ExpectedReturnFloor>,
) -> Result<SolveResult> {
    let n = mix.dim();
    let feasible = Feasible::new(floor, n)?;
    let raw = projected_gradient(n, &feasible, cfg, |x| mixture_exact_eval(mix, alpha, x))?;
    Ok(finish(raw, |f| f))
}

/// `Σ_i ( -μ_i^T x + z(α/ρ_i) √(x^T Σ_i x) )`; requires `α < min ρ_i`.
pub fn cvar_mixture_approx_objective(mix: &MixtureModel, alpha: Probability, x: &DVector<f64>) -> Result<f64> {
    let levels = approx_levels(mix, alpha)?;
    Ok(mix
        .means()
        .iter()
        .zip(mix.covariances())
        .zip(&levels)
        .map(|((mu, sigma), z)| -mu.dot(x) + z * quad_form(sigma, x).max(0.0).sqrt())
        .sum())
}

fn approx_levels(mix: &MixtureModel, alpha: Probability) -> Result<Vec<f64>> {
    let a = alpha.value();
    let min_rho = mix.rho().iter().cloned().fold(f64::INFINITY, f64::min);
    if a >= min_rho {
        return Err(Error::AlphaTooLarge { alpha: a, min_rho });
    }
    Ok(mix.rho().iter().map(|r| z_level(a / r)).collect())
}

/// Minimize the additive over-approximation of the mixture CVaR.
pub fn min_cvar_mixture_approx(
    mix: &MixtureModel,
    alpha: Probability,
    cfg: &SolveConfig,
    floor: Option<&ExpectedReturnFloor>,
) -> Result<SolveResult> {
    let n = mix.dim();
    let levels = approx_levels(mix, alpha)?;
    let feasible = Feasible::new(floor, n)?;
    let raw = projected_gradient(n, &feasible, cfg, |x| {
        let mut f = 0.0;
        let mut grad = DVector::zeros(n);
        for ((mu, sigma), z) in mix.means().iter().zip(mix.covariances()).zip(&levels) {
            let sx = sigma * x;
            let var = x.dot(&sx).max(0.0);
            let sd = var.sqrt();
            f += -mu.dot(x) + z * sd;
            grad -= mu;
            if var > VARIANCE_FLOOR {
                grad.axpy(z / sd, &sx, 1.0);
            }
        }
        Ok(Eval { f, grad, var: None })
    })?;
    Ok(finish(raw, |f| f))
}
