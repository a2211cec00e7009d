//! Promotion-time cure model with a nonparametric covariate effect.
//!
//! The survival function is `S(t | x) = exp(−θ(x) F(t; γ))` with
//! `θ(x) = exp(m(x))`, so the cure rate is `exp(−θ(x))`. The baseline
//! `F(·; γ)` is parametric; `m` is estimated by local polynomial
//! likelihood.

pub mod baseline;
pub mod data;
pub mod gammafit;
pub mod kernel;
pub mod km;
pub mod locfit;
pub mod model;
pub mod montecarlo;
pub mod simulate;

pub use baseline::{Baseline, FamilyKind};
pub use data::{Dataset, Status, Subject};
pub use model::{fit, fit_known_gamma, FitConfig, FitError, FitResult};
