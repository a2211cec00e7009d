//! Parametric baseline distributions `F(t; γ)`.
//!
//! Each family exposes the distribution function, density, and the first
//! and second derivatives in its parameters that the likelihood scores need.
//! Parameters are always positive; optimizers work on their logarithms via
//! [`Baseline::log_params`] and [`Baseline::with_log_params`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BaselineError {
    #[error("density is undefined at t = +inf")]
    InfiniteTime,
    #[error("time must be nonnegative, got {0}")]
    NegativeTime(f64),
    #[error("quantile level must lie in [0, 1), got {0}")]
    LevelOutOfRange(f64),
    #[error("baseline parameters must be positive and finite: {0:?}")]
    InvalidParameter(Vec<f64>),
    #[error("expected {expected} parameters, got {actual}")]
    Dimension { expected: usize, actual: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyKind {
    Exponential,
    Weibull,
}

impl FamilyKind {
    pub fn dim(self) -> usize {
        match self {
            FamilyKind::Exponential => 1,
            FamilyKind::Weibull => 2,
        }
    }

    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            FamilyKind::Exponential => &["rate"],
            FamilyKind::Weibull => &["shape", "scale"],
        }
    }
}

impl std::str::FromStr for FamilyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "exponential" => Ok(FamilyKind::Exponential),
            "weibull" => Ok(FamilyKind::Weibull),
            other => Err(format!("unknown baseline family `{other}` (expected exponential or weibull)")),
        }
    }
}

/// A baseline family together with its (natural-scale) parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum Baseline {
    /// `F(t) = 1 - exp(-rate * t)`.
    Exponential { rate: f64 },
    /// `F(t) = 1 - exp(-(t / scale)^shape)`.
    Weibull { shape: f64, scale: f64 },
}

impl Baseline {
    pub fn exponential(rate: f64) -> Result<Self, BaselineError> {
        Self::from_params(FamilyKind::Exponential, &[rate])
    }

    pub fn weibull(shape: f64, scale: f64) -> Result<Self, BaselineError> {
        Self::from_params(FamilyKind::Weibull, &[shape, scale])
    }

    pub fn from_params(kind: FamilyKind, params: &[f64]) -> Result<Self, BaselineError> {
        if params.len() != kind.dim() {
            return Err(BaselineError::Dimension { expected: kind.dim(), actual: params.len() });
        }
        if params.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(BaselineError::InvalidParameter(params.to_vec()));
        }
        Ok(match kind {
            FamilyKind::Exponential => Baseline::Exponential { rate: params[0] },
            FamilyKind::Weibull => Baseline::Weibull { shape: params[0], scale: params[1] },
        })
    }

    pub fn kind(&self) -> FamilyKind {
        match self {
            Baseline::Exponential { .. } => FamilyKind::Exponential,
            Baseline::Weibull { .. } => FamilyKind::Weibull,
        }
    }

    pub fn dim(&self) -> usize {
        self.kind().dim()
    }

    pub fn params(&self) -> DVector<f64> {
        match *self {
            Baseline::Exponential { rate } => DVector::from_vec(vec![rate]),
            Baseline::Weibull { shape, scale } => DVector::from_vec(vec![shape, scale]),
        }
    }

    pub fn log_params(&self) -> DVector<f64> {
        self.params().map(f64::ln)
    }

    pub fn with_params(&self, params: &[f64]) -> Result<Self, BaselineError> {
        Self::from_params(self.kind(), params)
    }

    pub fn with_log_params(&self, log_params: &[f64]) -> Result<Self, BaselineError> {
        let natural: Vec<f64> = log_params.iter().map(|u| u.exp()).collect();
        Self::from_params(self.kind(), &natural)
    }

    /// Distribution function; `cdf(+inf)` is exactly 1.
    pub fn cdf(&self, t: f64) -> f64 {
        if t == f64::INFINITY {
            return 1.0;
        }
        if t <= 0.0 {
            return 0.0;
        }
        match *self {
            Baseline::Exponential { rate } => -(-rate * t).exp_m1(),
            Baseline::Weibull { shape, scale } => -(-(t / scale).powf(shape)).exp_m1(),
        }
    }

    /// `1 - F(t)`, computed without cancellation.
    pub fn survival(&self, t: f64) -> f64 {
        if t == f64::INFINITY {
            return 0.0;
        }
        if t <= 0.0 {
            return 1.0;
        }
        match *self {
            Baseline::Exponential { rate } => (-rate * t).exp(),
            Baseline::Weibull { shape, scale } => (-(t / scale).powf(shape)).exp(),
        }
    }

    pub fn pdf(&self, t: f64) -> Result<f64, BaselineError> {
        self.log_pdf(t).map(f64::exp)
    }

    /// `ξ(t; γ) = log f(t; γ)`.
    pub fn log_pdf(&self, t: f64) -> Result<f64, BaselineError> {
        check_finite_time(t)?;
        Ok(match *self {
            Baseline::Exponential { rate } => rate.ln() - rate * t,
            Baseline::Weibull { shape, scale } => {
                let z = (t / scale).powf(shape);
                shape.ln() - scale.ln() + (shape - 1.0) * (t / scale).ln() - z
            }
        })
    }

    /// `∂F/∂γ` at finite `t`.
    pub fn dcdf_dgamma(&self, t: f64) -> Result<DVector<f64>, BaselineError> {
        check_finite_time(t)?;
        Ok(match *self {
            Baseline::Exponential { rate } => DVector::from_element(1, t * (-rate * t).exp()),
            Baseline::Weibull { shape, scale } => {
                let w = WeibullTerms::new(shape, scale, t);
                DVector::from_vec(vec![w.surv * w.dz_dk, w.surv * w.dz_dl])
            }
        })
    }

    /// `∂²F/∂γ∂γᵀ` at finite `t`.
    pub fn d2cdf_dgamma2(&self, t: f64) -> Result<DMatrix<f64>, BaselineError> {
        check_finite_time(t)?;
        Ok(match *self {
            Baseline::Exponential { rate } => DMatrix::from_element(1, 1, -t * t * (-rate * t).exp()),
            Baseline::Weibull { shape, scale } => {
                let w = WeibullTerms::new(shape, scale, t);
                let s = w.surv;
                DMatrix::from_row_slice(
                    2,
                    2,
                    &[
                        s * (w.d2z_dkk - w.dz_dk * w.dz_dk),
                        s * (w.d2z_dkl - w.dz_dk * w.dz_dl),
                        s * (w.d2z_dkl - w.dz_dk * w.dz_dl),
                        s * (w.d2z_dll - w.dz_dl * w.dz_dl),
                    ],
                )
            }
        })
    }

    /// `∂ξ/∂γ` at finite `t`.
    pub fn dlogpdf_dgamma(&self, t: f64) -> Result<DVector<f64>, BaselineError> {
        check_finite_time(t)?;
        Ok(match *self {
            Baseline::Exponential { rate } => DVector::from_element(1, 1.0 / rate - t),
            Baseline::Weibull { shape, scale } => {
                let w = WeibullTerms::new(shape, scale, t);
                DVector::from_vec(vec![
                    1.0 / shape + w.log_ratio - w.dz_dk,
                    -shape / scale - w.dz_dl,
                ])
            }
        })
    }

    /// `∂²ξ/∂γ∂γᵀ` at finite `t`.
    pub fn d2logpdf_dgamma2(&self, t: f64) -> Result<DMatrix<f64>, BaselineError> {
        check_finite_time(t)?;
        Ok(match *self {
            Baseline::Exponential { rate } => DMatrix::from_element(1, 1, -1.0 / (rate * rate)),
            Baseline::Weibull { shape, scale } => {
                let w = WeibullTerms::new(shape, scale, t);
                let kl = -1.0 / scale - w.d2z_dkl;
                DMatrix::from_row_slice(
                    2,
                    2,
                    &[
                        -1.0 / (shape * shape) - w.d2z_dkk,
                        kl,
                        kl,
                        shape / (scale * scale) - w.d2z_dll,
                    ],
                )
            }
        })
    }

    /// Inverse distribution function on `[0, 1)`.
    pub fn quantile(&self, u: f64) -> Result<f64, BaselineError> {
        if !(0.0..1.0).contains(&u) {
            return Err(BaselineError::LevelOutOfRange(u));
        }
        let h = -(-u).ln_1p();
        Ok(match *self {
            Baseline::Exponential { rate } => h / rate,
            Baseline::Weibull { shape, scale } => scale * h.powf(1.0 / shape),
        })
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Baseline::Exponential { rate } => 1.0 / rate,
            Baseline::Weibull { shape, scale } => scale * statrs::function::gamma::gamma(1.0 + 1.0 / shape),
        }
    }

    pub fn median(&self) -> f64 {
        match *self {
            Baseline::Exponential { rate } => std::f64::consts::LN_2 / rate,
            Baseline::Weibull { shape, scale } => scale * std::f64::consts::LN_2.powf(1.0 / shape),
        }
    }

    /// Method-of-moments start from event counts and total finite follow-up.
    pub fn moment_start(kind: FamilyKind, n_events: usize, total_time: f64) -> Self {
        let rate = if total_time > 0.0 { n_events as f64 / total_time } else { 1.0 };
        let rate = if rate.is_finite() && rate > 0.0 { rate.clamp(1e-8, 1e8) } else { 1.0 };
        match kind {
            FamilyKind::Exponential => Baseline::Exponential { rate },
            FamilyKind::Weibull => Baseline::Weibull { shape: 1.0, scale: 1.0 / rate },
        }
    }
}

fn check_finite_time(t: f64) -> Result<(), BaselineError> {
    if t == f64::INFINITY {
        return Err(BaselineError::InfiniteTime);
    }
    if !(t >= 0.0) {
        return Err(BaselineError::NegativeTime(t));
    }
    Ok(())
}

/// Shared pieces of the Weibull derivatives with `z = (t/λ)^k`.
struct WeibullTerms {
    surv: f64,
    log_ratio: f64,
    dz_dk: f64,
    dz_dl: f64,
    d2z_dkk: f64,
    d2z_dkl: f64,
    d2z_dll: f64,
}

impl WeibullTerms {
    fn new(k: f64, lambda: f64, t: f64) -> Self {
        let z = (t / lambda).powf(k);
        // z * ln(t/λ) -> 0 as t -> 0
        let log_ratio = if t > 0.0 { (t / lambda).ln() } else { 0.0 };
        Self {
            surv: (-z).exp(),
            log_ratio,
            dz_dk: z * log_ratio,
            dz_dl: -k * z / lambda,
            d2z_dkk: z * log_ratio * log_ratio,
            d2z_dkl: -(z / lambda) * (k * log_ratio + 1.0),
            d2z_dll: k * (k + 1.0) * z / (lambda * lambda),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300) || (a - b).abs() < 1e-13
    }

    #[test]
    fn exponential_closed_forms() {
        let b = Baseline::exponential(7.0).unwrap();
        assert_eq!(b.cdf(0.0), 0.0);
        assert_eq!(b.cdf(f64::INFINITY), 1.0);
        assert!((b.cdf(0.1) - (1.0 - (-0.7f64).exp())).abs() < 1e-15);
        assert_eq!(b.dcdf_dgamma(0.0).unwrap()[0], 0.0);
        let b2 = Baseline::exponential(2.0).unwrap();
        assert!((b2.dlogpdf_dgamma(1.0).unwrap()[0] + 0.5).abs() < 1e-15);
        assert!((b2.d2logpdf_dgamma2(1.0).unwrap()[(0, 0)] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn density_at_infinity_is_an_error() {
        let b = Baseline::exponential(7.0).unwrap();
        assert_eq!(b.pdf(f64::INFINITY), Err(BaselineError::InfiniteTime));
        assert_eq!(b.log_pdf(f64::INFINITY), Err(BaselineError::InfiniteTime));
        assert!(b.dcdf_dgamma(f64::INFINITY).is_err());
    }

    #[test]
    fn quantiles() {
        let b = Baseline::exponential(7.0).unwrap();
        assert_eq!(b.quantile(0.0).unwrap(), 0.0);
        assert!((b.quantile(0.5).unwrap() - std::f64::consts::LN_2 / 7.0).abs() < 1e-15);
        assert_eq!(b.quantile(1.0), Err(BaselineError::LevelOutOfRange(1.0)));
        let w = Baseline::weibull(2.0, 1.0).unwrap();
        assert!((w.quantile(1.0 - (-1.0f64).exp()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mean_and_median() {
        let b = Baseline::exponential(8.4e-5).unwrap();
        assert!((b.mean() - 11905.0).abs() < 1.0);
        assert!((b.median() - 8251.0).abs() < 1.0);
        assert_eq!(Baseline::exponential(1.0).unwrap().mean(), 1.0);
        // Weibull with shape 1 reduces to exponential
        let w = Baseline::weibull(1.0, 2.0).unwrap();
        assert!((w.mean() - 2.0).abs() < 1e-12);
        assert!((w.median() - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn parameter_validation() {
        assert!(Baseline::exponential(0.0).is_err());
        assert!(Baseline::weibull(1.0, -2.0).is_err());
        assert!(Baseline::from_params(FamilyKind::Weibull, &[1.0]).is_err());
        let b = Baseline::weibull(1.5, 0.3).unwrap();
        let back = b.with_log_params(b.log_params().as_slice()).unwrap();
        assert!(close(back.params()[0], 1.5, 1e-15) && close(back.params()[1], 0.3, 1e-15));
    }

    #[test]
    fn weibull_zero_time_is_finite() {
        let w = Baseline::weibull(1.7, 0.4).unwrap();
        assert!(w.dcdf_dgamma(0.0).unwrap().iter().all(|v| *v == 0.0));
        assert!(w.d2cdf_dgamma2(0.0).unwrap().iter().all(|v| v.is_finite()));
    }

    proptest! {
        #[test]
        fn cdf_monotone_and_quantile_inverts(rate in 0.01f64..50.0, shape in 0.3f64..4.0,
                                             t1 in 0.0f64..3.0, t2 in 0.0f64..3.0, u in 0.0f64..0.999) {
            for b in [Baseline::exponential(rate).unwrap(), Baseline::weibull(shape, 1.0 / rate.sqrt()).unwrap()] {
                let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
                prop_assert!(b.cdf(lo) <= b.cdf(hi));
                let q = b.quantile(u).unwrap();
                prop_assert!((b.cdf(q) - u).abs() < 1e-12);
                let t = lo + 1e-3;
                if b.cdf(t) < 1.0 - 1e-6 {
                    prop_assert!((b.quantile(b.cdf(t)).unwrap() - t).abs() <= 1e-10 * t.max(1.0));
                }
            }
        }
    }
}
