//! Shared fixtures for the integration tests.

#![allow(dead_code)]

use mixcvar::MixtureModel;

pub const RHO: [f64; 2] = [0.19, 0.81];

pub const MU1: [f64; 11] = [-0.0686, 0.4788, 0.6265, 0.3782, 0.1638, 0.7178, 0.3681, 1.3907, 0.0673, 1.3203, 0.6794];
pub const MU2: [f64; 11] = [1.4687, 1.7532, 1.5696, 1.3327, 1.5523, 1.4762, 1.1873, 1.8051, 1.6998, 1.4389, 1.0924];
pub const SD1: [f64; 11] = [8.5162, 8.2673, 6.7426, 11.9825, 8.1720, 10.0766, 8.7565, 11.8056, 8.4971, 6.9005, 6.1977];
pub const SD2: [f64; 11] = [5.5799, 4.3019, 3.2166, 5.5492, 4.0790, 4.9656, 4.3408, 5.4234, 4.7437, 3.9212, 3.6764];

pub const NORMAL_MU: [f64; 11] = [1.1769, 1.5112, 1.3905, 1.1514, 1.2887, 1.3322, 1.0318, 1.7264, 1.3898, 1.4164, 1.0140];
pub const NORMAL_SD: [f64; 11] = [6.2823, 5.3195, 4.1470, 7.2451, 5.1505, 6.2810, 5.4780, 7.1032, 5.6955, 4.6432, 4.2801];

/// The two-regime sector model with diagonal covariances.
pub fn sector_model() -> MixtureModel {
    MixtureModel::diagonal(RHO.to_vec(), vec![MU1.to_vec(), MU2.to_vec()], vec![SD1.to_vec(), SD2.to_vec()]).unwrap()
}

use mixcvar::distn::normal_cdf;
use mixcvar::model::ProjectedMixture;
use mixcvar::risk::var_normal;
use mixcvar::Probability;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

pub fn prob(a: f64) -> Probability {
    Probability::new(a).unwrap()
}

/// Uniform point on the simplex.
pub fn random_simplex<R: Rng>(rng: &mut R, n: usize) -> DVector<f64> {
    let e: DVector<f64> = DVector::from_fn(n, |_, _| Exp1.sample(rng));
    let s = e.sum();
    e / s
}

/// Strictly interior simplex point with every weight at least `floor / n`.
pub fn random_interior<R: Rng>(rng: &mut R, n: usize, floor: f64) -> DVector<f64> {
    random_simplex(rng, n) * (1.0 - floor) + DVector::from_element(n, floor / n as f64)
}

/// Correlation matrix from a random two-factor structure plus idiosyncratic noise.
pub fn random_correlation<R: Rng>(rng: &mut R, n: usize) -> DMatrix<f64> {
    let k = 2.min(n);
    let b: DMatrix<f64> = DMatrix::from_fn(n, k, |_, _| StandardNormal.sample(rng));
    let mut c = &b * b.transpose();
    for j in 0..n {
        c[(j, j)] += rng.random_range(0.2..1.5);
    }
    let d = DVector::from_fn(n, |j, _| 1.0 / c[(j, j)].sqrt());
    DMatrix::from_fn(n, n, |i, j| c[(i, j)] * d[i] * d[j])
}

/// Covariance with the given standard deviations and a random correlation.
pub fn random_covariance_with_sd<R: Rng>(rng: &mut R, sd: &[f64]) -> DMatrix<f64> {
    let r = random_correlation(rng, sd.len());
    DMatrix::from_fn(sd.len(), sd.len(), |i, j| r[(i, j)] * sd[i] * sd[j])
}

pub fn random_covariance<R: Rng>(rng: &mut R, n: usize) -> DMatrix<f64> {
    let sd: Vec<f64> = (0..n).map(|_| rng.random_range(2.0..12.0)).collect();
    random_covariance_with_sd(rng, &sd)
}

/// Mixture weights with every entry at least `min_rho`.
pub fn random_weights<R: Rng>(rng: &mut R, m: usize, min_rho: f64) -> Vec<f64> {
    random_simplex(rng, m).iter().map(|w| min_rho + (1.0 - m as f64 * min_rho) * w).collect()
}

pub fn random_mixture<R: Rng>(rng: &mut R, n: usize, m: usize, min_rho: f64) -> MixtureModel {
    let rho = random_weights(rng, m, min_rho);
    let mu = (0..m).map(|_| DVector::from_fn(n, |_, _| rng.random_range(-1.0..2.0))).collect();
    let sigma = (0..m).map(|_| random_covariance(rng, n)).collect();
    MixtureModel::new(rho, mu, sigma).unwrap()
}

/// A projected mixture and a tail level for the bound and VaR checks.
pub struct FuzzCase {
    pub components: usize,
    pub pm: ProjectedMixture,
    pub alpha: Probability,
}

/// Random projected mixtures with `n <= 11`, `m in {1, 2, 3}` and
/// `α < min ρ_i`, restricted to cases where every component tail
/// `VaR_{α/ρ_i}` is nonnegative (the regime where the additive upper bound
/// holds).
pub fn fuzz_corpus<R: Rng>(rng: &mut R, count: usize) -> Vec<FuzzCase> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let n = rng.random_range(1..=11);
        let m = rng.random_range(1..=3);
        let mix = random_mixture(rng, n, m, 0.05);
        let x = mixcvar::Portfolio::from_vector(random_simplex(rng, n)).unwrap();
        let pm = mix.project(&x).unwrap();
        let min_rho = pm.rho().iter().cloned().fold(1.0, f64::min);
        let alpha = rng.random_range(0.001..0.95) * min_rho;
        let regime = (0..m).all(|i| var_normal(pm.nu()[i], pm.sd()[i], prob(alpha / pm.rho()[i])) >= 0.0);
        if regime {
            out.push(FuzzCase { components: m, pm, alpha: prob(alpha) });
        }
    }
    out
}

pub fn mixture_cdf_oracle(pm: &ProjectedMixture, y: f64) -> f64 {
    pm.rho().iter().zip(pm.nu()).zip(pm.sd()).map(|((r, nu), sd)| r * normal_cdf((y - nu) / sd)).sum()
}

/// `VaR_α` by plain bisection of `F(-c) = α`.
pub fn bisect_var(pm: &ProjectedMixture, alpha: f64) -> f64 {
    let spread = pm.nu().iter().map(|v| v.abs()).fold(0.0, f64::max) + 50.0 * pm.sd().iter().cloned().fold(0.0, f64::max);
    let (mut lo, mut hi) = (-spread - 1.0, spread + 1.0);
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mixture_cdf_oracle(pm, -mid) > alpha {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * mid.abs().max(1.0) {
            break;
        }
    }
    0.5 * (lo + hi)
}

fn normal_pdf(u: f64) -> f64 {
    (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `c + E[(-R - c)^+] / α` written out component by component.
pub fn cvar_objective_oracle(pm: &ProjectedMixture, c: f64, alpha: f64) -> f64 {
    let tail: f64 = pm
        .rho()
        .iter()
        .zip(pm.nu())
        .zip(pm.sd())
        .map(|((r, nu), sd)| {
            let u = (-c - nu) / sd;
            r * (sd * normal_pdf(u) - (c + nu) * normal_cdf(u))
        })
        .sum();
    c + tail / alpha
}

/// Exact mixture CVaR by golden-section minimization over `c`.
pub fn golden_cvar(pm: &ProjectedMixture, alpha: f64) -> f64 {
    let spread = pm.nu().iter().map(|v| v.abs()).fold(0.0, f64::max) + 40.0 * pm.sd().iter().cloned().fold(0.0, f64::max);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (-spread - 1.0, spread + 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (cvar_objective_oracle(pm, c, alpha), cvar_objective_oracle(pm, d, alpha));
    for _ in 0..200 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = cvar_objective_oracle(pm, c, alpha);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = cvar_objective_oracle(pm, d, alpha);
        }
    }
    fc.min(fd)
}
