//! Mixture return models, simplex portfolios and projected univariate laws.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::stream_rng;

const RHO_SUM_TOL: f64 = 1e-12;
const PORTFOLIO_SUM_TOL: f64 = 1e-9;
const SYMMETRY_TOL: f64 = 1e-12;
// Asymmetry above this (relative) is treated as a caller bug rather than noise.
const ASYMMETRY_REJECT: f64 = 1e-6;
const PSD_TOL: f64 = 1e-10;

/// A finite Gaussian mixture `r = r_i ~ N(mu_i, sigma_i)` with probability `rho_i`.
///
/// Construction validates the mixing weights and dimensions. Covariances that
/// are symmetric up to rounding are symmetrized; covariances with an
/// eigenvalue below `-1e-10 * ||Σ||` are repaired by eigenvalue clipping at
/// `1e-10 * trace / n` and the repair is logged.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureModel {
    rho: Vec<f64>,
    mu: Vec<DVector<f64>>,
    sigma: Vec<DMatrix<f64>>,
}

impl MixtureModel {
    pub fn new(rho: Vec<f64>, mu: Vec<DVector<f64>>, sigma: Vec<DMatrix<f64>>) -> Result<Self> {
        let m = rho.len();
        if m == 0 {
            return Err(Error::InvalidModel("at least one component is required".into()));
        }
        if mu.len() != m || sigma.len() != m {
            return Err(Error::Dimension(format!(
                "{m} weights but {} means and {} covariances",
                mu.len(),
                sigma.len()
            )));
        }
        if let Some(r) = rho.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
            return Err(Error::InvalidModel(format!("mixing weight {r} is not positive")));
        }
        let total: f64 = rho.iter().sum();
        if (total - 1.0).abs() > RHO_SUM_TOL {
            return Err(Error::InvalidModel(format!("mixing weights sum to {total}, not 1")));
        }
        let n = mu[0].len();
        if n == 0 {
            return Err(Error::InvalidModel("zero-dimensional returns".into()));
        }
        let mut clean = Vec::with_capacity(m);
        for (i, (mean, cov)) in mu.iter().zip(sigma).enumerate() {
            if mean.len() != n || cov.nrows() != n || cov.ncols() != n {
                return Err(Error::Dimension(format!(
                    "component {i}: mean has length {}, covariance is {}x{}, expected {n}",
                    mean.len(),
                    cov.nrows(),
                    cov.ncols()
                )));
            }
            if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
                return Err(Error::InvalidModel(format!("component {i} has non-finite entries")));
            }
            clean.push(clean_covariance(&cov, i)?);
        }
        Ok(Self { rho, mu, sigma: clean })
    }

    /// Single multivariate normal `N(mu, sigma)`.
    pub fn normal(mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        Self::new(vec![1.0], vec![mu], vec![sigma])
    }

    /// Mixture with diagonal covariances built from per-asset standard deviations.
    pub fn diagonal(rho: Vec<f64>, mu: Vec<Vec<f64>>, sd: Vec<Vec<f64>>) -> Result<Self> {
        let mu = mu.into_iter().map(DVector::from_vec).collect();
        let sigma = sd
            .into_iter()
            .map(|s| DMatrix::from_diagonal(&DVector::from_iterator(s.len(), s.iter().map(|v| v * v))))
            .collect();
        Self::new(rho, mu, sigma)
    }

    #[inline]
    pub fn components(&self) -> usize {
        self.rho.len()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.mu[0].len()
    }

    #[inline]
    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    #[inline]
    pub fn means(&self) -> &[DVector<f64>] {
        &self.mu
    }

    #[inline]
    pub fn covariances(&self) -> &[DMatrix<f64>] {
        &self.sigma
    }

    /// Mean and covariance of the mixture (law of total covariance):
    /// `E = Σ ρ_i μ_i`, `Cov = Σ ρ_i Σ_i + Σ ρ_i (μ_i - E)(μ_i - E)^T`.
    ///
    /// For two components the second sum equals `ρ_1 ρ_2 (μ_1 - μ_2)(μ_1 - μ_2)^T`.
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.dim();
        if self.components() == 1 {
            return (self.mu[0].clone(), self.sigma[0].clone());
        }
        let mut mean = DVector::zeros(n);
        for (r, m) in self.rho.iter().zip(&self.mu) {
            mean.axpy(*r, m, 1.0);
        }
        let mut cov = DMatrix::zeros(n, n);
        for ((r, m), s) in self.rho.iter().zip(&self.mu).zip(&self.sigma) {
            cov += s * *r;
            let d = m - &mean;
            cov.ger(*r, &d, &d, 1.0);
        }
        symmetrize(&mut cov);
        (mean, cov)
    }

    /// Univariate law of `r^T x`: per-component means `μ_i^T x` and standard
    /// deviations `sqrt(x^T Σ_i x)`.
    pub fn project(&self, x: &Portfolio) -> Result<ProjectedMixture> {
        self.project_weights(x.weights())
    }

    pub(crate) fn project_weights(&self, x: &DVector<f64>) -> Result<ProjectedMixture> {
        if x.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "portfolio has {} weights, model has {} assets",
                x.len(),
                self.dim()
            )));
        }
        let nu = self.mu.iter().map(|m| m.dot(x)).collect();
        let sd = self.sigma.iter().map(|s| quad_form(s, x).max(0.0).sqrt()).collect();
        Ok(ProjectedMixture { rho: self.rho.clone(), nu, sd })
    }

    /// `count` draws (one per row): a component index from `rho`, then
    /// `μ_i + L_i z` with `L_i L_i^T = Σ_i`.
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<DMatrix<f64>> {
        if count == 0 {
            return Err(Error::InvalidArgument("sample count must be at least 1".into()));
        }
        let n = self.dim();
        let factors = self
            .sigma
            .iter()
            .map(covariance_factor)
            .collect::<Result<Vec<_>>>()?;
        let mut cumulative = Vec::with_capacity(self.components());
        let mut acc = 0.0;
        for r in &self.rho {
            acc += r;
            cumulative.push(acc);
        }
        let mut out = DMatrix::zeros(count, n);
        let mut z = DVector::zeros(n);
        for row in 0..count {
            let u: f64 = rng.random::<f64>() * acc;
            let k = cumulative.iter().position(|c| u < *c).unwrap_or(self.components() - 1);
            for v in z.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let draw = &self.mu[k] + &factors[k] * &z;
            out.row_mut(row).copy_from(&draw.transpose());
        }
        Ok(out)
    }

    /// [`sample`](Self::sample) on stream 0 of a fresh generator keyed by `seed`.
    pub fn sample_seeded(&self, count: usize, seed: u64) -> Result<DMatrix<f64>> {
        self.sample(count, &mut stream_rng(seed, 0))
    }

    /// Same model with replaced component means (used by the Black-Litterman adjustments).
    pub fn with_means(&self, mu: Vec<DVector<f64>>) -> Result<Self> {
        Self::new(self.rho.clone(), mu, self.sigma.clone())
    }
}

/// `x^T A x`.
#[inline]
pub(crate) fn quad_form(a: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    let n = x.len();
    let mut total = 0.0;
    for j in 0..n {
        let col = a.column(j);
        let mut s = 0.0;
        for i in 0..n {
            s += col[i] * x[i];
        }
        total += s * x[j];
    }
    total
}

pub(crate) fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

fn clean_covariance(cov: &DMatrix<f64>, index: usize) -> Result<DMatrix<f64>> {
    let scale = cov.amax().max(1.0);
    let asym = (cov - cov.transpose()).amax();
    if asym > ASYMMETRY_REJECT * scale {
        return Err(Error::InvalidModel(format!(
            "covariance {index} is not symmetric (max asymmetry {asym:e})"
        )));
    }
    let mut out = cov.clone();
    if asym > 0.0 {
        if asym > SYMMETRY_TOL * scale {
            log::warn!("covariance {index}: symmetrized (max asymmetry {asym:e})");
        }
        symmetrize(&mut out);
    }
    repair_psd(&mut out, index);
    Ok(out)
}

/// Clip eigenvalues of a symmetric matrix that fail the PSD tolerance.
/// Returns whether a repair happened.
pub(crate) fn repair_psd(cov: &mut DMatrix<f64>, index: usize) -> bool {
    let n = cov.nrows();
    if Cholesky::new(cov.clone()).is_some() {
        return false;
    }
    let eig = SymmetricEigen::new(cov.clone());
    let norm = eig.eigenvalues.amax();
    let min = eig.eigenvalues.min();
    if min >= -PSD_TOL * norm {
        return false;
    }
    let floor = (PSD_TOL * cov.trace() / n as f64).max(0.0);
    let clipped = eig.eigenvalues.map(|l| l.max(floor));
    let mut fixed = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    symmetrize(&mut fixed);
    log::warn!("covariance {index}: smallest eigenvalue {min:e} clipped to {floor:e}");
    *cov = fixed;
    true
}

/// A factor `L` with `L L^T = Σ`: Cholesky when it exists, otherwise the
/// symmetric square root through the eigendecomposition (singular PSD input).
pub(crate) fn covariance_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(ch) = Cholesky::new(cov.clone()) {
        return Ok(ch.l());
    }
    let eig = SymmetricEigen::new(cov.clone());
    let norm = eig.eigenvalues.amax();
    if eig.eigenvalues.min() < -PSD_TOL * norm.max(f64::MIN_POSITIVE) {
        return Err(Error::Factorization(format!(
            "covariance has eigenvalue {:e}",
            eig.eigenvalues.min()
        )));
    }
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root))
}

/// Long-only, fully invested weights (a point of the unit simplex).
#[derive(Debug, Clone, PartialEq)]
pub struct Portfolio(DVector<f64>);

impl Portfolio {
    /// Validates `Σ x = 1` (within 1e-9) and `x ≥ -1e-12`; tiny negatives are clamped to 0.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        Self::from_vector(DVector::from_vec(weights))
    }

    pub fn from_vector(mut x: DVector<f64>) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::InvalidArgument("empty portfolio".into()));
        }
        if let Some(v) = x.iter().find(|v| !v.is_finite() || **v < -1e-12) {
            return Err(Error::InvalidArgument(format!("portfolio weight {v} is negative or not finite")));
        }
        x.apply(|v| *v = v.max(0.0));
        let total = x.sum();
        if (total - 1.0).abs() > PORTFOLIO_SUM_TOL {
            return Err(Error::InvalidArgument(format!("portfolio weights sum to {total}, not 1")));
        }
        Ok(Self(x))
    }

    /// Build from a vector already known to be on the simplex up to rounding.
    pub(crate) fn from_simplex_point(mut x: DVector<f64>) -> Self {
        x.apply(|v| *v = v.max(0.0));
        let total = x.sum();
        if total > 0.0 {
            x /= total;
        }
        Self(x)
    }

    pub fn equal(n: usize) -> Self {
        Self(DVector::from_element(n, 1.0 / n as f64))
    }

    pub fn unit(n: usize, j: usize) -> Self {
        let mut x = DVector::zeros(n);
        x[j] = 1.0;
        Self(x)
    }

    #[inline]
    pub fn weights(&self) -> &DVector<f64> {
        &self.0
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.0
    }
}

/// Univariate mixture law of a portfolio return: `Σ ρ_i N(ν_i, σ_i²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedMixture {
    pub(crate) rho: Vec<f64>,
    pub(crate) nu: Vec<f64>,
    pub(crate) sd: Vec<f64>,
}

impl ProjectedMixture {
    pub fn new(rho: Vec<f64>, nu: Vec<f64>, sd: Vec<f64>) -> Result<Self> {
        let m = rho.len();
        if m == 0 || nu.len() != m || sd.len() != m {
            return Err(Error::Dimension(format!(
                "projected mixture needs matching lengths, got {m}, {}, {}",
                nu.len(),
                sd.len()
            )));
        }
        if rho.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::InvalidModel("mixing weights must be positive".into()));
        }
        let total: f64 = rho.iter().sum();
        if (total - 1.0).abs() > RHO_SUM_TOL {
            return Err(Error::InvalidModel(format!("mixing weights sum to {total}, not 1")));
        }
        if sd.iter().any(|s| !(s.is_finite() && *s >= 0.0)) || nu.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidModel("means must be finite and standard deviations nonnegative".into()));
        }
        Ok(Self { rho, nu, sd })
    }

    /// A single normal `N(nu, sd²)`.
    pub fn normal(nu: f64, sd: f64) -> Result<Self> {
        Self::new(vec![1.0], vec![nu], vec![sd])
    }

    #[inline]
    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    #[inline]
    pub fn nu(&self) -> &[f64] {
        &self.nu
    }

    #[inline]
    pub fn sd(&self) -> &[f64] {
        &self.sd
    }

    #[inline]
    pub fn components(&self) -> usize {
        self.rho.len()
    }

    pub fn mean(&self) -> f64 {
        self.rho.iter().zip(&self.nu).map(|(r, v)| r * v).sum()
    }

    /// `Σ ρ_i σ_i² + Σ ρ_i (ν_i - mean)²`.
    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        self.rho
            .iter()
            .zip(&self.nu)
            .zip(&self.sd)
            .map(|((r, v), s)| r * (s * s + (v - mean) * (v - mean)))
            .sum()
    }

    pub(crate) fn max_sd(&self) -> f64 {
        self.sd.iter().cloned().fold(0.0, f64::max)
    }
}
