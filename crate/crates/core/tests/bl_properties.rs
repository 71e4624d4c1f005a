//! Black-Litterman and inverse-optimization properties.

mod common;

use common::*;
use mixcvar::bl::{
    adjusted_mu_mixture, adjusted_mu_normal, classical_bl, classical_bl_gls, equilibrium_target_mixture,
    equilibrium_target_normal, implied_returns, ViewSet,
};
use mixcvar::optimize::{min_cvar_mixture_approx, SolveConfig};
use mixcvar::rng::stream_rng;
use mixcvar::Portfolio;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

proptest! {
    #[test]
    fn closed_form_equals_stacked_gls(seed in any::<u64>(), tau in 0.01f64..5.0) {
        let mut rng = stream_rng(seed, 0);
        let n = rng.random_range(2..=6);
        let k = rng.random_range(1..=n);
        let sigma = random_covariance(&mut rng, n);
        let pi = DVector::from_fn(n, |_, _| rng.random_range(-1.0..2.0));
        let p = DMatrix::from_fn(k, n, |_, _| rng.random_range(-1.0..1.0));
        let q = DVector::from_fn(k, |_, _| rng.random_range(-1.0..2.0));
        let views = ViewSet::new(p, q, random_covariance(&mut rng, k)).unwrap();
        let a = classical_bl(&pi, tau, &sigma, &views).unwrap();
        let b = classical_bl_gls(&pi, tau, &sigma, &views).unwrap();
        prop_assert!((a - b).amax() < 1e-8);
    }

    #[test]
    fn normal_adjustment_is_a_convex_blend(seed in any::<u64>(), tau in 0.01f64..10.0) {
        let mut rng = stream_rng(seed, 1);
        let n = rng.random_range(2..=6);
        let sigma = random_covariance(&mut rng, n);
        let target = DVector::from_fn(n, |_, _| rng.random_range(-1.0..2.0));
        let mu_hat = DVector::from_fn(n, |_, _| rng.random_range(-1.0..2.0));
        let (mu, lambda) = adjusted_mu_normal(&target, &mu_hat, &sigma, tau).unwrap();
        let e = DVector::from_element(n, 1.0);
        let inv = sigma.clone().try_inverse().unwrap();
        let expected_lambda = -(e.transpose() * &inv * (&mu_hat - &target))[(0, 0)] / (e.transpose() * &inv * &e)[(0, 0)];
        let t = tau / (1.0 + tau);
        let blend = (&target - &e * expected_lambda) * (1.0 - t) + &mu_hat * t;
        prop_assert!((lambda - expected_lambda).abs() < 1e-8 * (1.0 + expected_lambda.abs()));
        prop_assert!((mu - blend).amax() < 1e-8);
    }
}

#[test]
fn implied_returns_scale_with_delta() {
    let mut rng = stream_rng(2, 0);
    let sigma = random_covariance(&mut rng, 4);
    let x = random_interior(&mut rng, 4, 0.5);
    let a = implied_returns(&sigma, &x, 1.0).unwrap();
    let b = implied_returns(&sigma, &x, 2.5).unwrap();
    assert!((b - a * 2.5).amax() < 1e-12);
}

#[test]
fn normal_target_makes_market_stationary() {
    let mut rng = stream_rng(3, 0);
    let sigma = random_covariance(&mut rng, 5);
    let xm = Portfolio::from_vector(random_interior(&mut rng, 5, 0.5)).unwrap();
    let a = prob(0.05);
    let target = equilibrium_target_normal(&sigma, &xm, a).unwrap();
    let x = xm.weights();
    let sd = (x.transpose() * &sigma * x)[(0, 0)].sqrt();
    let grad = -&target + &sigma * x * (mixcvar::distn::z_factor(a) / sd);
    assert!(grad.amax() < 1e-10);
}

#[test]
fn mixture_target_makes_market_optimal_for_the_additive_objective() {
    let mut rng = stream_rng(4, 0);
    let mix = random_mixture(&mut rng, 4, 2, 0.2);
    let xm = Portfolio::from_vector(random_interior(&mut rng, 4, 0.5)).unwrap();
    let a = prob(0.05);
    let target = equilibrium_target_mixture(&mix, &xm, a).unwrap();
    let (_, pooled) = mix.moments();
    let (means, _) = adjusted_mu_mixture(&target, mix.means(), &pooled, mix.covariances(), 1e-8).unwrap();
    let adjusted = mix.with_means(means).unwrap();
    let x = min_cvar_mixture_approx(&adjusted, a, &SolveConfig::default(), None).unwrap().x;
    assert!((x.weights() - xm.weights()).amax() < 1e-3, "{:?} vs {:?}", x.as_slice(), xm.as_slice());
}
