//! Black-Litterman estimation and its inverse-optimization extensions.
//!
//! Every estimator here is a generalized least-squares fit of a stacked
//! linear system `A θ ≈ b` with block-diagonal error covariance `Ω̄`:
//!
//! | estimator | unknowns `θ` | rows of `A` | `b` | `Ω̄` |
//! |---|---|---|---|---|
//! | classical BL (Theil stack) | `μ` | `[I; P]` | `[Π; q]` | `diag(τΣ̂, Ω)` |
//! | normal CVaR | `(μ, λ)` | `[[I, e], [I, 0]]` | `[μ̃_N; μ̂]` | `diag(τΣ̂, Σ̂)` |
//! | normal CVaR with views | `(μ, λ)` | `[[I, e], [P, 0]]` | `[μ̃_N; q]` | `diag(τΣ̂, Ω)` |
//! | mixture CVaR | `(μ_1..μ_m, λ)` | `[[I..I, e], [I,0..,0], ..]` | `[μ̃_M; μ̂_1; ..]` | `diag(τΣ̂, Σ̂_1, ..)` |
//!
//! The equilibrium targets come from the first-order conditions of the
//! CVaR problems at an interior market portfolio `x^m`:
//! `μ̃_N = z(α) Σ̂ x^m / √(x^mᵀ Σ̂ x^m)` and
//! `μ̃_M = Σ_i z(α/ρ_i) Σ̂_i x^m / √(x^mᵀ Σ̂_i x^m)`. Small `τ` trusts the
//! equilibrium, large `τ` recovers the sample estimates. In the mixture
//! problem the `τΣ̂` block uses the pooled sample covariance and the mixing
//! weights stay at their estimates.
//!
//! `λ` is a free, unpenalized unknown. When the stack does not determine it
//! (no views at all) the minimum-norm solution is returned.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::distn::{z_level, Probability};
use crate::error::{Error, Result};
use crate::model::{quad_form, MixtureModel, Portfolio};

/// Relative pivot threshold of the equilibrated normal matrix below which a
/// GLS system is reported as rank deficient.
const RANK_TOL: f64 = 1e-13;
/// Relative singular-value cutoff for the minimum-norm solve.
const PINV_RCOND: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BLConfig {
    pub tau: f64,
    /// Risk aversion for the mean-variance implied returns only.
    pub delta: f64,
    pub alpha: Probability,
}

impl BLConfig {
    pub fn new(tau: f64, delta: f64, alpha: Probability) -> Result<Self> {
        check_tau(tau)?;
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::InvalidArgument(format!("delta = {delta} must be positive")));
        }
        Ok(Self { tau, delta, alpha })
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("tau = {tau} must be positive and finite")))
    }
}

/// Investor views `P μ ~ N(q, Ω)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    p: DMatrix<f64>,
    q: DVector<f64>,
    omega: DMatrix<f64>,
}

impl ViewSet {
    /// `omega` must be symmetric positive definite (usually diagonal).
    pub fn new(p: DMatrix<f64>, q: DVector<f64>, omega: DMatrix<f64>) -> Result<Self> {
        let k = p.nrows();
        if q.len() != k || omega.nrows() != k || omega.ncols() != k {
            return Err(Error::Dimension(format!(
                "views: P has {k} rows, q has {}, Omega is {}x{}",
                q.len(),
                omega.nrows(),
                omega.ncols()
            )));
        }
        if (&omega - omega.transpose()).amax() > 1e-12 * omega.amax().max(1.0) {
            return Err(Error::InvalidArgument("view covariance must be symmetric".into()));
        }
        if k > 0 && Cholesky::new(omega.clone()).is_none() {
            return Err(Error::InvalidArgument("view covariance must be positive definite".into()));
        }
        Ok(Self { p, q, omega })
    }

    /// Views with independent errors of the given variances.
    pub fn diagonal(p: DMatrix<f64>, q: DVector<f64>, variances: &[f64]) -> Result<Self> {
        if variances.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument("view variances must be positive".into()));
        }
        Self::new(p, q, DMatrix::from_diagonal(&DVector::from_column_slice(variances)))
    }

    /// No views over `n` assets.
    pub fn empty(n: usize) -> Self {
        Self { p: DMatrix::zeros(0, n), q: DVector::zeros(0), omega: DMatrix::zeros(0, 0) }
    }

    pub fn len(&self) -> usize {
        self.p.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.p.nrows() == 0
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn q(&self) -> &DVector<f64> {
        &self.q
    }

    pub fn omega(&self) -> &DMatrix<f64> {
        &self.omega
    }
}

/// Mean-variance implied returns `Π = 2 δ Σ̂ x^m`.
pub fn implied_returns(sigma: &DMatrix<f64>, x_m: &DVector<f64>, delta: f64) -> Result<DVector<f64>> {
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument(format!("delta = {delta} must be positive")));
    }
    if sigma.nrows() != x_m.len() || sigma.ncols() != x_m.len() {
        return Err(Error::Dimension(format!(
            "covariance is {}x{}, market weights have length {}",
            sigma.nrows(),
            sigma.ncols(),
            x_m.len()
        )));
    }
    Ok(sigma * x_m * (2.0 * delta))
}

fn whiten(a: &DMatrix<f64>, b: &DVector<f64>, omega: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let rows = a.nrows();
    if b.len() != rows || omega.nrows() != rows || omega.ncols() != rows {
        return Err(Error::Dimension(format!(
            "GLS: A is {}x{}, b has {} entries, Omega is {}x{}",
            rows,
            a.ncols(),
            b.len(),
            omega.nrows(),
            omega.ncols()
        )));
    }
    let chol = Cholesky::new(omega.clone())
        .ok_or_else(|| Error::Singular("error covariance is not positive definite".into()))?;
    let l = chol.l_dirty();
    let mut wa = a.clone();
    let mut wb = b.clone();
    l.solve_lower_triangular_mut(&mut wa);
    l.solve_lower_triangular_mut(&mut wb);
    Ok((wa, wb))
}

/// `argmin_x (Ax - b)^T Ω^{-1} (Ax - b) = (A^T Ω^{-1} A)^{-1} A^T Ω^{-1} b`.
///
/// Solved through a Cholesky factorization of the Jacobi-equilibrated
/// normal matrix; rank deficiency in `A` is an error.
pub fn gls_solve(a: &DMatrix<f64>, b: &DVector<f64>, omega: &DMatrix<f64>) -> Result<DVector<f64>> {
    let (wa, wb) = whiten(a, b, omega)?;
    let normal = wa.transpose() * &wa;
    let rhs = wa.transpose() * wb;
    solve_spd_equilibrated(normal, rhs)
}

fn solve_spd_equilibrated(normal: DMatrix<f64>, rhs: DVector<f64>) -> Result<DVector<f64>> {
    let k = normal.nrows();
    let d = DVector::from_iterator(k, (0..k).map(|j| normal[(j, j)]));
    if d.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Singular("design matrix has a zero column".into()));
    }
    let s = d.map(|v| 1.0 / v.sqrt());
    let scaled = DMatrix::from_fn(k, k, |i, j| normal[(i, j)] * s[i] * s[j]);
    let chol = spd_cholesky(scaled)?;
    let y = chol.solve(&rhs.component_mul(&s));
    Ok(y.component_mul(&s))
}

fn spd_cholesky(m: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let chol = Cholesky::new(m).ok_or_else(|| Error::Singular("normal matrix is not positive definite".into()))?;
    let l = chol.l_dirty();
    let k = l.nrows();
    let max = (0..k).map(|j| l[(j, j)] * l[(j, j)]).fold(0.0, f64::max);
    let min = (0..k).map(|j| l[(j, j)] * l[(j, j)]).fold(f64::INFINITY, f64::min);
    if k > 0 && min < RANK_TOL * max {
        return Err(Error::Singular(format!("design matrix is rank deficient (pivot ratio {:e})", min / max)));
    }
    Ok(chol)
}

/// Minimum-norm GLS solution: the pseudo-inverse of the whitened design.
pub fn gls_solve_min_norm(a: &DMatrix<f64>, b: &DVector<f64>, omega: &DMatrix<f64>) -> Result<DVector<f64>> {
    let (wa, wb) = whiten(a, b, omega)?;
    let svd = wa.svd(true, true);
    let cutoff = PINV_RCOND * svd.singular_values.max();
    svd.solve(&wb, cutoff).map_err(|e| Error::Singular(e.to_string()))
}

/// Classical BL mean `((τΣ̂)^{-1} + P^T Ω^{-1} P)^{-1} ((τΣ̂)^{-1} Π + P^T Ω^{-1} q)`.
pub fn classical_bl(pi: &DVector<f64>, tau: f64, sigma: &DMatrix<f64>, views: &ViewSet) -> Result<DVector<f64>> {
    check_tau(tau)?;
    let n = pi.len();
    check_views(views, n)?;
    check_cov(sigma, n)?;
    let prior = Cholesky::new(sigma * tau)
        .ok_or_else(|| Error::Singular("tau * covariance is not positive definite".into()))?;
    let prior_inv = prior.inverse();
    let mut precision = prior_inv.clone();
    let mut rhs = &prior_inv * pi;
    if !views.is_empty() {
        let om = Cholesky::new(views.omega.clone())
            .ok_or_else(|| Error::Singular("view covariance is not positive definite".into()))?;
        let om_p = om.solve(&views.p);
        precision += views.p.transpose() * &om_p;
        rhs += om_p.transpose() * &views.q;
    }
    crate::model::symmetrize(&mut precision);
    solve_spd_equilibrated(precision, rhs)
}

/// The same estimate as [`classical_bl`] computed as GLS on the Theil
/// mixed-estimation stack `[I; P] μ ≈ [Π; q]` with `Ω̄ = diag(τΣ̂, Ω)`.
pub fn classical_bl_gls(pi: &DVector<f64>, tau: f64, sigma: &DMatrix<f64>, views: &ViewSet) -> Result<DVector<f64>> {
    check_tau(tau)?;
    let n = pi.len();
    check_views(views, n)?;
    check_cov(sigma, n)?;
    let k = views.len();
    let mut a = DMatrix::zeros(n + k, n);
    a.view_mut((0, 0), (n, n)).fill_with_identity();
    a.view_mut((n, 0), (k, n)).copy_from(&views.p);
    let b = stack(&[pi, &views.q]);
    let omega = block_diag(&[&(sigma * tau), &views.omega]);
    gls_solve(&a, &b, &omega)
}

/// `μ̃_N = z(α) Σ̂ x^m / √(x^mᵀ Σ̂ x^m)`.
pub fn equilibrium_target_normal(sigma: &DMatrix<f64>, x_m: &Portfolio, alpha: Probability) -> Result<DVector<f64>> {
    let x = x_m.weights();
    check_cov(sigma, x.len())?;
    check_interior(x)?;
    let var = quad_form(sigma, x);
    if !(var > 0.0) {
        return Err(Error::InvalidArgument("market portfolio has zero variance".into()));
    }
    Ok(sigma * x * (z_level(alpha.value()) / var.sqrt()))
}

/// `μ̃_M = Σ_i z(α/ρ_i) Σ̂_i x^m / √(x^mᵀ Σ̂_i x^m)`; requires `α < min ρ_i`.
pub fn equilibrium_target_mixture(mix: &MixtureModel, x_m: &Portfolio, alpha: Probability) -> Result<DVector<f64>> {
    let x = x_m.weights();
    if x.len() != mix.dim() {
        return Err(Error::Dimension(format!("market has {} weights, model has {} assets", x.len(), mix.dim())));
    }
    check_interior(x)?;
    let a = alpha.value();
    let min_rho = mix.rho().iter().cloned().fold(f64::INFINITY, f64::min);
    if a >= min_rho {
        return Err(Error::AlphaTooLarge { alpha: a, min_rho });
    }
    let mut target = DVector::zeros(x.len());
    for (i, (rho, sigma)) in mix.rho().iter().zip(mix.covariances()).enumerate() {
        let var = quad_form(sigma, x);
        if !(var > 0.0) {
            return Err(Error::InvalidArgument(format!("market portfolio has zero variance under component {}", i + 1)));
        }
        target += sigma * x * (z_level(a / rho) / var.sqrt());
    }
    Ok(target)
}

/// GLS on `[[I, e], [I, 0]] (μ, λ) ≈ [μ̃_N; μ̂]` with `Ω̄ = diag(τΣ̂, Σ̂)`.
pub fn adjusted_mu_normal(
    mu_tilde: &DVector<f64>,
    mu_hat: &DVector<f64>,
    sigma: &DMatrix<f64>,
    tau: f64,
) -> Result<(DVector<f64>, f64)> {
    let n = mu_tilde.len();
    let views = ViewSet { p: DMatrix::identity(n, n), q: mu_hat.clone(), omega: sigma.clone() };
    adjusted_mu_normal_views(mu_tilde, &views, sigma, tau)
}

/// GLS on `[[I, e], [P, 0]] (μ, λ) ≈ [μ̃_N; q]` with `Ω̄ = diag(τΣ̂, Ω)`.
///
/// Without views `λ` is not identified and the minimum-norm split of
/// `μ + λ e = μ̃_N` is returned.
pub fn adjusted_mu_normal_views(
    mu_tilde: &DVector<f64>,
    views: &ViewSet,
    sigma: &DMatrix<f64>,
    tau: f64,
) -> Result<(DVector<f64>, f64)> {
    check_tau(tau)?;
    let n = mu_tilde.len();
    check_views(views, n)?;
    check_cov(sigma, n)?;
    let k = views.len();
    let mut a = DMatrix::zeros(n + k, n + 1);
    a.view_mut((0, 0), (n, n)).fill_with_identity();
    a.view_mut((0, n), (n, 1)).fill(1.0);
    a.view_mut((n, 0), (k, n)).copy_from(&views.p);
    let b = stack(&[mu_tilde, &views.q]);
    let omega = block_diag(&[&(sigma * tau), &views.omega]);
    let theta = if views.is_empty() { gls_solve_min_norm(&a, &b, &omega)? } else { gls_solve(&a, &b, &omega)? };
    Ok((theta.rows(0, n).into_owned(), theta[n]))
}

/// GLS on the mixture stack: `Σ_i μ_i + λ e ≈ μ̃_M` with covariance `τΣ̂`
/// (pooled), and `μ_i ≈ μ̂_i` with covariance `Σ̂_i`, for every component.
pub fn adjusted_mu_mixture(
    mu_tilde: &DVector<f64>,
    mu_hat: &[DVector<f64>],
    sigma_pooled: &DMatrix<f64>,
    sigma_hat: &[DMatrix<f64>],
    tau: f64,
) -> Result<(Vec<DVector<f64>>, f64)> {
    check_tau(tau)?;
    let n = mu_tilde.len();
    let m = mu_hat.len();
    if m == 0 || sigma_hat.len() != m {
        return Err(Error::Dimension(format!("{m} component means but {} covariances", sigma_hat.len())));
    }
    check_cov(sigma_pooled, n)?;
    for (mu, s) in mu_hat.iter().zip(sigma_hat) {
        if mu.len() != n {
            return Err(Error::Dimension(format!("component mean has length {}, expected {n}", mu.len())));
        }
        check_cov(s, n)?;
    }
    let cols = m * n + 1;
    let mut a = DMatrix::zeros((m + 1) * n, cols);
    for i in 0..m {
        a.view_mut((0, i * n), (n, n)).fill_with_identity();
        a.view_mut(((i + 1) * n, i * n), (n, n)).fill_with_identity();
    }
    a.view_mut((0, m * n), (n, 1)).fill(1.0);
    let mut parts: Vec<&DVector<f64>> = vec![mu_tilde];
    parts.extend(mu_hat.iter());
    let b = stack(&parts);
    let scaled = sigma_pooled * tau;
    let mut blocks: Vec<&DMatrix<f64>> = vec![&scaled];
    blocks.extend(sigma_hat.iter());
    let omega = block_diag(&blocks);
    let theta = gls_solve(&a, &b, &omega)?;
    let means = (0..m).map(|i| theta.rows(i * n, n).into_owned()).collect();
    Ok((means, theta[m * n]))
}

fn check_interior(x: &DVector<f64>) -> Result<()> {
    if let Some(j) = x.iter().position(|v| !(*v > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "market weight {j} is {}; the equilibrium conditions need every market weight positive",
            x[j]
        )));
    }
    Ok(())
}

fn check_cov(sigma: &DMatrix<f64>, n: usize) -> Result<()> {
    if sigma.nrows() != n || sigma.ncols() != n {
        return Err(Error::Dimension(format!("covariance is {}x{}, expected {n}x{n}", sigma.nrows(), sigma.ncols())));
    }
    Ok(())
}

fn check_views(views: &ViewSet, n: usize) -> Result<()> {
    if views.p.ncols() != n {
        return Err(Error::Dimension(format!("views cover {} assets, expected {n}", views.p.ncols())));
    }
    Ok(())
}

fn stack(parts: &[&DVector<f64>]) -> DVector<f64> {
    DVector::from_iterator(parts.iter().map(|p| p.len()).sum(), parts.iter().flat_map(|p| p.iter().cloned()))
}

fn block_diag(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let size = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(size, size);
    let mut at = 0;
    for b in blocks {
        out.view_mut((at, at), (b.nrows(), b.ncols())).copy_from(b);
        at += b.nrows();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimize::{min_cvar_normal, SolveConfig};
    use proptest::prelude::*;
    use rand::Rng;

    fn p(v: f64) -> Probability {
        Probability::new(v).unwrap()
    }

    fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = crate::rng::stream_rng(seed, 0);
        let a = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        &a * a.transpose() + DMatrix::identity(n, n) * 0.5
    }

    fn random_vec(n: usize, seed: u64) -> DVector<f64> {
        let mut rng = crate::rng::stream_rng(seed, 1);
        DVector::from_fn(n, |_, _| rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Normal equations solved by LU on the explicitly inverted covariance.
    fn gls_oracle(a: &DMatrix<f64>, b: &DVector<f64>, omega: &DMatrix<f64>) -> DVector<f64> {
        let oi = omega.clone().try_inverse().unwrap();
        let lhs = a.transpose() * &oi * a;
        let rhs = a.transpose() * &oi * b;
        lhs.lu().solve(&rhs).unwrap()
    }

    #[test]
    fn implied_returns_values() {
        let x = DVector::from_vec(vec![0.2, 0.3, 0.5]);
        assert_eq!(implied_returns(&DMatrix::identity(3, 3), &x, 0.5).unwrap(), x);
        assert_eq!(implied_returns(&random_spd(3, 1), &DVector::zeros(3), 2.0).unwrap(), DVector::zeros(3));
        let s = random_spd(3, 2);
        let pi = implied_returns(&s, &x, 1.7).unwrap();
        for i in 0..3 {
            let hand: f64 = (0..3).map(|j| 2.0 * 1.7 * s[(i, j)] * x[j]).sum();
            assert!((pi[i] - hand).abs() < 1e-14);
        }
        assert!(implied_returns(&s, &x, 0.0).is_err());
        assert!(implied_returns(&s, &DVector::zeros(2), 1.0).is_err());
    }

    #[test]
    fn gls_trivial_cases() {
        let b = random_vec(4, 3);
        let x = gls_solve(&DMatrix::identity(4, 4), &b, &random_spd(4, 4)).unwrap();
        assert!((x - &b).amax() < 1e-12);
        let b1 = random_vec(3, 5);
        let b2 = random_vec(3, 6);
        let mut a = DMatrix::zeros(6, 3);
        a.view_mut((0, 0), (3, 3)).fill_with_identity();
        a.view_mut((3, 0), (3, 3)).fill_with_identity();
        let x = gls_solve(&a, &stack(&[&b1, &b2]), &DMatrix::identity(6, 6)).unwrap();
        assert!((x - (b1 + b2) / 2.0).amax() < 1e-12);
    }

    #[test]
    fn gls_matches_oracle_and_orthogonality() {
        for seed in 0..20 {
            let mut rng = crate::rng::stream_rng(seed, 9);
            let a = DMatrix::from_fn(9, 4, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let b = random_vec(9, seed);
            let omega = random_spd(9, seed + 100);
            let x = gls_solve(&a, &b, &omega).unwrap();
            assert!((&x - gls_oracle(&a, &b, &omega)).amax() < 1e-9);
            let r = &a * &x - &b;
            let ortho = a.transpose() * omega.clone().cholesky().unwrap().solve(&r);
            assert!(ortho.amax() < 1e-9);
        }
    }

    #[test]
    fn gls_rejects_rank_deficiency() {
        let mut a = DMatrix::zeros(3, 2);
        a.column_mut(0).fill(1.0);
        a.column_mut(1).fill(2.0);
        assert!(matches!(gls_solve(&a, &DVector::zeros(3), &DMatrix::identity(3, 3)), Err(Error::Singular(_))));
        let bad_omega = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(gls_solve(&DMatrix::identity(2, 2), &DVector::zeros(2), &bad_omega).is_err());
    }

    #[test]
    fn classical_bl_equal_precision_average() {
        let n = 3;
        let s = random_spd(n, 7);
        let tau = 0.3;
        let pi = random_vec(n, 8);
        let q = random_vec(n, 9);
        let views = ViewSet::new(DMatrix::identity(n, n), q.clone(), &s * tau).unwrap();
        let mu = classical_bl(&pi, tau, &s, &views).unwrap();
        assert!((mu - (&pi + &q) / 2.0).amax() < 1e-12);
    }

    #[test]
    fn classical_bl_vacuous_views() {
        let s = random_spd(3, 10);
        let pi = random_vec(3, 11);
        let views = ViewSet::diagonal(DMatrix::identity(3, 3), random_vec(3, 12), &[1e12; 3]).unwrap();
        let mu = classical_bl(&pi, 0.5, &s, &views).unwrap();
        assert!((mu - pi).amax() < 1e-6);
    }

    #[test]
    fn classical_bl_closed_form_equals_gls() {
        for seed in 0..30 {
            let n = 5;
            let s = random_spd(n, seed);
            let pi = random_vec(n, seed + 1);
            let mut rng = crate::rng::stream_rng(seed, 4);
            let pm = DMatrix::from_fn(2, n, |_, _| rng.random::<f64>() - 0.5);
            let views = ViewSet::diagonal(pm, random_vec(2, seed + 2), &[0.3, 1.1]).unwrap();
            let a = classical_bl(&pi, 0.25, &s, &views).unwrap();
            let b = classical_bl_gls(&pi, 0.25, &s, &views).unwrap();
            assert!((a - b).amax() < 1e-8);
        }
    }

    #[test]
    fn equilibrium_normal_isotropic_and_homogeneous() {
        let n = 4;
        let x = Portfolio::equal(n);
        let t = equilibrium_target_normal(&DMatrix::identity(n, n), &x, p(0.01)).unwrap();
        let z = z_level(0.01);
        assert!((t - DVector::from_element(n, z / (n as f64).sqrt())).amax() < 1e-14);
        let s = random_spd(n, 13);
        let t1 = equilibrium_target_normal(&s, &x, p(0.05)).unwrap();
        let t4 = equilibrium_target_normal(&(&s * 4.0), &x, p(0.05)).unwrap();
        assert!((t4 - t1 * 2.0).amax() < 1e-12);
        assert!(equilibrium_target_normal(&s, &Portfolio::unit(n, 0), p(0.05)).is_err());
    }

    #[test]
    fn equilibrium_mixture_collapses() {
        let s = random_spd(3, 14);
        let mu = random_vec(3, 15);
        let x = Portfolio::new(vec![0.2, 0.3, 0.5]).unwrap();
        let single = MixtureModel::normal(mu.clone(), s.clone()).unwrap();
        let a = equilibrium_target_mixture(&single, &x, p(0.01)).unwrap();
        let b = equilibrium_target_normal(&s, &x, p(0.01)).unwrap();
        assert!((a - b).amax() < 1e-13);
        let twin = MixtureModel::new(vec![0.5, 0.5], vec![mu.clone(), mu], vec![s.clone(), s.clone()]).unwrap();
        let c = equilibrium_target_mixture(&twin, &x, p(0.01)).unwrap();
        let expected = &s * x.weights() * (2.0 * z_level(0.02) / quad_form(&s, x.weights()).sqrt());
        assert!((c - expected).amax() < 1e-12);
        assert!(equilibrium_target_mixture(&twin, &x, p(0.5)).is_err());
    }

    #[test]
    fn adjusted_normal_consistent_system() {
        let s = random_spd(4, 16);
        let mu = random_vec(4, 17);
        let (adj, lambda) = adjusted_mu_normal(&mu, &mu, &s, 0.7).unwrap();
        assert!((adj - mu).amax() < 1e-12);
        assert!(lambda.abs() < 1e-12);
    }

    #[test]
    fn adjusted_normal_large_tau_recovers_sample_mean() {
        let s = random_spd(4, 18);
        let x = Portfolio::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let target = equilibrium_target_normal(&s, &x, p(0.01)).unwrap();
        let mu_hat = random_vec(4, 19);
        let (adj, _) = adjusted_mu_normal(&target, &mu_hat, &s, 1e8).unwrap();
        assert!((adj - mu_hat).amax() < 1e-4);
    }

    #[test]
    fn adjusted_normal_small_tau_recovers_market() {
        let s = random_spd(4, 20);
        let x = Portfolio::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let target = equilibrium_target_normal(&s, &x, p(0.01)).unwrap();
        let mu_hat = random_vec(4, 21);
        let (adj, _) = adjusted_mu_normal(&target, &mu_hat, &s, 1e-8).unwrap();
        let r = min_cvar_normal(&adj, &s, p(0.01), &SolveConfig::default(), None).unwrap();
        assert!((r.x.weights() - x.weights()).amax() < 1e-3);
    }

    #[test]
    fn residual_to_equilibrium_grows_with_tau() {
        let s = random_spd(4, 22);
        let x = Portfolio::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let target = equilibrium_target_normal(&s, &x, p(0.01)).unwrap();
        let mu_hat = random_vec(4, 23) * 3.0;
        let mut prev = -1.0;
        for tau in [1e-3, 1e-2, 0.1, 1.0, 10.0, 100.0] {
            let (adj, lambda) = adjusted_mu_normal(&target, &mu_hat, &s, tau).unwrap();
            let gap = (adj.add_scalar(lambda) - &target).norm();
            assert!(gap > prev, "tau = {tau}");
            prev = gap;
        }
    }

    #[test]
    fn views_specialize_to_sample_mean() {
        let s = random_spd(3, 24);
        let target = random_vec(3, 25);
        let mu_hat = random_vec(3, 26);
        let views = ViewSet::new(DMatrix::identity(3, 3), mu_hat.clone(), s.clone()).unwrap();
        let a = adjusted_mu_normal(&target, &mu_hat, &s, 0.4).unwrap();
        let b = adjusted_mu_normal_views(&target, &views, &s, 0.4).unwrap();
        assert!((a.0 - b.0).amax() < 1e-12);
        assert!((a.1 - b.1).abs() < 1e-12);
    }

    #[test]
    fn no_views_gives_minimum_norm_split() {
        let s = random_spd(3, 27);
        let target = random_vec(3, 28);
        let (mu, lambda) = adjusted_mu_normal_views(&target, &ViewSet::empty(3), &s, 0.4).unwrap();
        assert!((mu.add_scalar(lambda) - &target).amax() < 1e-10);
        // The minimum-norm point of {μ + λe = t} has λ = e^T t / (n + 1).
        assert!((lambda - target.sum() / 4.0).abs() < 1e-10);
    }

    #[test]
    fn adjusted_mixture_consistent_and_limits() {
        let n = 3;
        let s1 = random_spd(n, 30);
        let s2 = random_spd(n, 31);
        let pooled = random_spd(n, 32);
        let m1 = random_vec(n, 33);
        let m2 = random_vec(n, 34);
        let target = &m1 + &m2;
        let (means, lambda) =
            adjusted_mu_mixture(&target, &[m1.clone(), m2.clone()], &pooled, &[s1.clone(), s2.clone()], 0.5).unwrap();
        assert!((&means[0] - &m1).amax() < 1e-12 && (&means[1] - &m2).amax() < 1e-12);
        assert!(lambda.abs() < 1e-12);
        let other = random_vec(n, 35) * 5.0;
        let (means, _) = adjusted_mu_mixture(&other, &[m1.clone(), m2.clone()], &pooled, &[s1, s2], 1e8).unwrap();
        assert!((&means[0] - &m1).amax() < 1e-4 && (&means[1] - &m2).amax() < 1e-4);
    }

    proptest! {
        #[test]
        fn adjusted_normal_is_linear(seed in 0u64..1000, c in -3.0f64..3.0) {
            let s = random_spd(3, seed);
            let t1 = random_vec(3, seed + 1);
            let h1 = random_vec(3, seed + 2);
            let t2 = random_vec(3, seed + 3);
            let h2 = random_vec(3, seed + 4);
            let (a, la) = adjusted_mu_normal(&t1, &h1, &s, 0.3).unwrap();
            let (b, lb) = adjusted_mu_normal(&t2, &h2, &s, 0.3).unwrap();
            let (ab, lab) = adjusted_mu_normal(&(&t1 + &t2 * c), &(&h1 + &h2 * c), &s, 0.3).unwrap();
            prop_assert!((ab - (a + b * c)).amax() < 1e-9);
            prop_assert!((lab - (la + lb * c)).abs() < 1e-9);
        }
    }
}
