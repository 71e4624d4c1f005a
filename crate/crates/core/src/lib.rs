//! Portfolio risk engineering under Gaussian-mixture return models.
//!
//! The crate covers the full pipeline:
//!
//! * [`model`]: mixture return models, simplex portfolios and their projected
//!   univariate laws, moments and seeded sampling.
//! * [`distn`]: standard normal primitives and the CVaR scaling factor.
//! * [`risk`]: VaR/CVaR for normal and mixture laws, plus the closed-form
//!   under/over-approximations of mixture VaR and CVaR.
//! * [`fit`]: sample moments and EM fitting of mixtures.
//! * [`optimize`]: simplex-constrained risk minimization.
//! * [`bl`]: implied returns, GLS, classical Black-Litterman and the
//!   inverse-optimization adjustments for normal and mixture CVaR.
//! * [`backtest`]: rolling-horizon strategy evaluation and the synthetic
//!   studies.
//! * [`data`]: CSV and model-file persistence, synthetic market data.
//!
//! All returns are simple returns in **percent per period** (a monthly return
//! of 1.5% is stored as `1.5`). Risk measures follow the left-tail convention:
//! VaR and CVaR are positive when the tail loses money.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backtest;
pub mod bl;
pub mod data;
pub mod distn;
mod error;
pub mod fit;
pub mod model;
pub mod optimize;
pub mod rng;
pub mod risk;

pub use error::{Error, Result};
pub use model::{MixtureModel, Portfolio, ProjectedMixture};
pub use distn::Probability;
