//! Conditional likelihood for the baseline parameters given `θ(Xᵢ)`.
//!
//! Only non-cured subjects enter:
//!
//! ```text
//! ℓ*(γ) = n⁻¹ Σ_{Yᵢ<∞} { Δᵢ [log θᵢ + log f(Yᵢ;γ) − θᵢ F(Yᵢ;γ)]
//!                      + (1−Δᵢ) log(exp(−θᵢ F(Yᵢ;γ)) − exp(−θᵢ))
//!                      − (1 − exp(−θᵢ)) }
//! ```
//!
//! The trailing term does not depend on `γ`; it is kept so values match the
//! printed criterion, and [`GammaOptions::include_constant`] can drop it.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline::{Baseline, BaselineError};
use crate::data::{Dataset, Status};

/// Floor on `1 − exp(−θ F̄)` in the censored-subject score.
pub const DENOMINATOR_FLOOR: f64 = 1e-300;
const LOG_STEP_CAP: f64 = 5.0;
const MAX_HALVINGS: usize = 50;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GammaFitError {
    #[error("theta has {theta} entries but the dataset has {subjects} subjects")]
    LengthMismatch { theta: usize, subjects: usize },
    #[error("theta at subject {index} must be positive and finite, got {value}")]
    InvalidTheta { index: usize, value: f64 },
    #[error("log of a nonpositive survival difference at censored subject {index}")]
    LogOfNonpositive { index: usize },
    #[error("every subject is cured; the conditional likelihood carries no information on the baseline")]
    NoInformative,
    #[error("baseline optimizer did not converge after {iterations} iterations")]
    NonConvergence { iterations: usize },
    #[error(transparent)]
    Baseline(#[from] BaselineError),
}

/// `θ(Xᵢ) = exp(m̂(Xᵢ))` aligned with the dataset's subjects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaAtData(Vec<f64>);

impl ThetaAtData {
    pub fn new(values: Vec<f64>) -> Result<Self, GammaFitError> {
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
            return Err(GammaFitError::InvalidTheta { index, value });
        }
        Ok(Self(values))
    }

    pub fn constant(n: usize, value: f64) -> Result<Self, GammaFitError> {
        Self::new(vec![value; n])
    }

    pub fn from_log(m: impl IntoIterator<Item = f64>) -> Result<Self, GammaFitError> {
        Self::new(m.into_iter().map(f64::exp).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check_lengths(ds: &Dataset, theta: &ThetaAtData) -> Result<(), GammaFitError> {
    if ds.len() != theta.len() {
        return Err(GammaFitError::LengthMismatch { theta: theta.len(), subjects: ds.len() });
    }
    Ok(())
}

pub fn cond_loglik(ds: &Dataset, baseline: &Baseline, theta: &ThetaAtData) -> Result<f64, GammaFitError> {
    cond_loglik_with(ds, baseline, theta, true)
}

pub fn cond_loglik_with(
    ds: &Dataset,
    baseline: &Baseline,
    theta: &ThetaAtData,
    include_constant: bool,
) -> Result<f64, GammaFitError> {
    check_lengths(ds, theta)?;
    let mut total = 0.0;
    for (index, (s, &th)) in ds.subjects().iter().zip(theta.as_slice()).enumerate() {
        let term = match s.status {
            Status::Cured => continue,
            Status::Event => th.ln() + baseline.log_pdf(s.time)? - th * baseline.cdf(s.time),
            Status::Censored => {
                // log(e^{−θF} − e^{−θ}) = −θF + log(1 − e^{−θ F̄})
                let gap = -(-th * baseline.survival(s.time)).exp_m1();
                if !(gap > 0.0) {
                    return Err(GammaFitError::LogOfNonpositive { index });
                }
                -th * baseline.cdf(s.time) + gap.ln()
            }
        };
        total += term;
        if include_constant {
            total += (-th).exp_m1();
        }
    }
    Ok(total / ds.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreEval {
    pub gradient: DVector<f64>,
    /// Censored subjects whose denominator hit [`DENOMINATOR_FLOOR`].
    pub guarded: usize,
}

/// Gradient of [`cond_loglik`] in the natural parameters.
pub fn cond_score(ds: &Dataset, baseline: &Baseline, theta: &ThetaAtData) -> Result<ScoreEval, GammaFitError> {
    check_lengths(ds, theta)?;
    let mut gradient = DVector::zeros(baseline.dim());
    let mut guarded = 0;
    for (s, &th) in ds.subjects().iter().zip(theta.as_slice()) {
        match s.status {
            Status::Cured => {}
            Status::Event => {
                let dxi = baseline.dlogpdf_dgamma(s.time)?;
                let df = baseline.dcdf_dgamma(s.time)?;
                gradient += dxi - df * th;
            }
            Status::Censored => {
                let df = baseline.dcdf_dgamma(s.time)?;
                let mut denom = -(-th * baseline.survival(s.time)).exp_m1();
                if !(denom >= DENOMINATOR_FLOOR) {
                    denom = DENOMINATOR_FLOOR;
                    guarded += 1;
                }
                gradient -= df * (th / denom);
            }
        }
    }
    Ok(ScoreEval { gradient: gradient / ds.len() as f64, guarded })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaOptions {
    pub max_iter: usize,
    pub score_tol: f64,
    pub include_constant: bool,
}

impl Default for GammaOptions {
    fn default() -> Self {
        Self { max_iter: 100, score_tol: 1e-8, include_constant: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GammaFit {
    pub baseline: Baseline,
    pub loglik: f64,
    pub iterations: usize,
    /// Objective at the start and after each accepted step.
    pub trace: Vec<f64>,
    pub guarded: usize,
}

pub fn maximize_gamma(
    ds: &Dataset,
    init: &Baseline,
    theta: &ThetaAtData,
) -> Result<GammaFit, GammaFitError> {
    maximize_gamma_with(ds, init, theta, &GammaOptions::default())
}

/// Safeguarded Newton ascent on the log-parameters.
///
/// The Hessian comes from central differences of the analytic score. If no
/// step-halved Newton (or gradient) step improves the objective, each
/// log-coordinate is searched by golden section before giving up.
pub fn maximize_gamma_with(
    ds: &Dataset,
    init: &Baseline,
    theta: &ThetaAtData,
    opts: &GammaOptions,
) -> Result<GammaFit, GammaFitError> {
    check_lengths(ds, theta)?;
    if ds.count(Status::Cured) == ds.len() {
        return Err(GammaFitError::NoInformative);
    }
    let objective = |u: &DVector<f64>| -> f64 {
        init.with_log_params(u.as_slice())
            .ok()
            .and_then(|b| cond_loglik_with(ds, &b, theta, opts.include_constant).ok())
            .filter(|v| v.is_finite())
            .unwrap_or(f64::NEG_INFINITY)
    };
    let log_score = |u: &DVector<f64>| -> Result<(DVector<f64>, DVector<f64>, usize), GammaFitError> {
        let b = init.with_log_params(u.as_slice())?;
        let s = cond_score(ds, &b, theta)?;
        let natural = b.params();
        Ok((s.gradient.component_mul(&natural), s.gradient, s.guarded))
    };

    let mut u = init.log_params();
    let mut value = cond_loglik_with(ds, init, theta, opts.include_constant)?;
    let mut trace = vec![value];
    let dim = u.len();

    for iteration in 0..opts.max_iter {
        let (g_log, g_nat, guarded) = log_score(&u)?;
        if g_nat.amax() < opts.score_tol {
            return finish(init, &u, value, iteration, trace, guarded);
        }

        let mut hess = DMatrix::zeros(dim, dim);
        for j in 0..dim {
            let step = 1e-5 * u[j].abs().max(1.0);
            let mut up = u.clone();
            let mut dn = u.clone();
            up[j] += step;
            dn[j] -= step;
            let col = (log_score(&up)?.0 - log_score(&dn)?.0) / (2.0 * step);
            hess.set_column(j, &col);
        }
        let neg = -(&hess + hess.transpose()) * 0.5;
        let mut dir = match neg.cholesky() {
            Some(ch) => ch.solve(&g_log),
            None => g_log.clone(),
        };
        let norm = dir.norm();
        if norm > LOG_STEP_CAP {
            dir *= LOG_STEP_CAP / norm;
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let cand = &u + &dir * t;
            let v = objective(&cand);
            if v >= value {
                accepted = Some((cand, v));
                break;
            }
            t *= 0.5;
        }

        let (cand, v) = match accepted {
            Some(a) => a,
            None => {
                if g_nat.amax() < 1e-6 {
                    // no further ascent at working precision
                    return finish(init, &u, value, iteration, trace, guarded);
                }
                match coordinate_golden(&objective, &u, value) {
                    Some(a) => a,
                    None => return Err(GammaFitError::NonConvergence { iterations: iteration + 1 }),
                }
            }
        };
        let moved = (&cand - &u).amax();
        u = cand;
        value = v;
        trace.push(value);
        if moved < 1e-14 {
            let (_, _, guarded) = log_score(&u)?;
            return finish(init, &u, value, iteration + 1, trace, guarded);
        }
    }
    Err(GammaFitError::NonConvergence { iterations: opts.max_iter })
}

fn finish(
    init: &Baseline,
    u: &DVector<f64>,
    loglik: f64,
    iterations: usize,
    trace: Vec<f64>,
    guarded: usize,
) -> Result<GammaFit, GammaFitError> {
    if guarded > 0 {
        warn!("{guarded} censored subjects hit the score denominator floor; they carry no information");
    }
    Ok(GammaFit { baseline: init.with_log_params(u.as_slice())?, loglik, iterations, trace, guarded })
}

/// Golden-section search along each log-coordinate in turn; returns the
/// improved point if any coordinate moved uphill.
fn coordinate_golden<F>(objective: &F, u: &DVector<f64>, value: f64) -> Option<(DVector<f64>, f64)>
where
    F: Fn(&DVector<f64>) -> f64,
{
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut best = u.clone();
    let mut best_value = value;
    let mut improved = false;
    for j in 0..u.len() {
        let at = |z: f64| {
            let mut p = best.clone();
            p[j] = z;
            objective(&p)
        };
        let (mut a, mut b) = (best[j] - 2.0, best[j] + 2.0);
        let mut c = b - INV_PHI * (b - a);
        let mut d = a + INV_PHI * (b - a);
        let (mut fc, mut fd) = (at(c), at(d));
        for _ in 0..80 {
            if fc > fd {
                b = d;
                d = c;
                fd = fc;
                c = b - INV_PHI * (b - a);
                fc = at(c);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + INV_PHI * (b - a);
                fd = at(d);
            }
        }
        let z = 0.5 * (a + b);
        let fz = at(z);
        if fz > best_value {
            best[j] = z;
            best_value = fz;
            improved = true;
        }
    }
    improved.then_some((best, best_value))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaSe {
    /// Per-parameter standard errors; NaN when the information is not
    /// positive definite.
    pub se: Vec<f64>,
    /// Observed information `−H` of the summed conditional log-likelihood.
    pub information: DMatrix<f64>,
    pub positive_definite: bool,
}

/// Standard errors from the inverse observed information of `n · ℓ*`,
/// with the Hessian taken as central differences of the analytic score.
pub fn gamma_se(ds: &Dataset, baseline: &Baseline, theta: &ThetaAtData) -> Result<GammaSe, GammaFitError> {
    check_lengths(ds, theta)?;
    let n = ds.len() as f64;
    let gamma = baseline.params();
    let dim = gamma.len();
    let mut hess = DMatrix::zeros(dim, dim);
    for j in 0..dim {
        let step = 1e-5 * gamma[j].abs();
        let mut up = gamma.clone();
        let mut dn = gamma.clone();
        up[j] += step;
        dn[j] -= step;
        let g_up = cond_score(ds, &baseline.with_params(up.as_slice())?, theta)?.gradient;
        let g_dn = cond_score(ds, &baseline.with_params(dn.as_slice())?, theta)?.gradient;
        hess.set_column(j, &((g_up - g_dn) * (n / (2.0 * step))));
    }
    let information = -(&hess + hess.transpose()) * 0.5;
    match information.clone().cholesky() {
        Some(ch) => {
            let inv = ch.inverse();
            Ok(GammaSe {
                se: (0..dim).map(|j| inv[(j, j)].sqrt()).collect(),
                information,
                positive_definite: true,
            })
        }
        None => {
            warn!("observed information for the baseline parameters is not positive definite");
            Ok(GammaSe { se: vec![f64::NAN; dim], information, positive_definite: false })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Subject;

    #[test]
    fn cured_only_contributes_nothing() {
        let ds = Dataset::new(vec![Subject::cured(1.0), Subject::cured(2.0)]).unwrap();
        let theta = ThetaAtData::new(vec![1.5, 0.7]).unwrap();
        for rate in [0.1, 1.0, 7.0] {
            let b = Baseline::exponential(rate).unwrap();
            assert_eq!(cond_loglik(&ds, &b, &theta).unwrap(), 0.0);
            assert!(cond_score(&ds, &b, &theta).unwrap().gradient.iter().all(|v| *v == 0.0));
        }
        let b = Baseline::exponential(1.0).unwrap();
        assert_eq!(maximize_gamma(&ds, &b, &theta).unwrap_err(), GammaFitError::NoInformative);
    }

    #[test]
    fn single_event_expansion() {
        let y = 0.13;
        let th = 2.2;
        let b = Baseline::exponential(7.0).unwrap();
        let ds = Dataset::new(vec![Subject::event(y, 1.0)]).unwrap();
        let theta = ThetaAtData::new(vec![th]).unwrap();
        let expected = th.ln() + b.log_pdf(y).unwrap() - th * b.cdf(y) - (1.0 - (-th).exp());
        assert!((cond_loglik(&ds, &b, &theta).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn theta_validation() {
        assert_eq!(ThetaAtData::new(vec![1.0, 0.0]), Err(GammaFitError::InvalidTheta { index: 1, value: 0.0 }));
        assert!(ThetaAtData::new(vec![f64::INFINITY]).is_err());
        let ds = Dataset::new(vec![Subject::event(0.1, 0.0)]).unwrap();
        let b = Baseline::exponential(1.0).unwrap();
        let theta = ThetaAtData::new(vec![1.0, 1.0]).unwrap();
        assert!(matches!(cond_loglik(&ds, &b, &theta), Err(GammaFitError::LengthMismatch { .. })));
    }

    #[test]
    fn degenerate_baseline_is_reported() {
        // F(Y) rounds to 1 for a huge rate, killing the censored term
        let ds = Dataset::new(vec![Subject::event(0.1, 0.0), Subject::censored(5.0, 0.0)]).unwrap();
        let theta = ThetaAtData::constant(2, 1.0).unwrap();
        let b = Baseline::exponential(1e3).unwrap();
        assert_eq!(cond_loglik(&ds, &b, &theta), Err(GammaFitError::LogOfNonpositive { index: 1 }));
        let s = cond_score(&ds, &b, &theta).unwrap();
        assert_eq!(s.guarded, 1);
        assert!(s.gradient[0].is_finite());
    }

    #[test]
    fn replication_halves_se() {
        let subjects = vec![
            Subject::event(0.05, 1.0),
            Subject::event(0.21, 1.5),
            Subject::censored(0.3, 2.0),
            Subject::event(0.11, 2.5),
            Subject::cured(3.0),
            Subject::censored(0.08, 3.5),
        ];
        let theta_vals = vec![2.0, 3.0, 1.5, 2.5, 1.0, 4.0];
        let ds = Dataset::new(subjects.clone()).unwrap();
        let theta = ThetaAtData::new(theta_vals.clone()).unwrap();
        let b = Baseline::exponential(7.0).unwrap();
        let fit = maximize_gamma(&ds, &b, &theta).unwrap();
        let se1 = gamma_se(&ds, &fit.baseline, &theta).unwrap();

        let ds4 = Dataset::new(subjects.iter().cycle().take(24).copied().collect()).unwrap();
        let theta4 = ThetaAtData::new(theta_vals.iter().cycle().take(24).copied().collect()).unwrap();
        let fit4 = maximize_gamma(&ds4, &b, &theta4).unwrap();
        assert!((fit4.baseline.params()[0] - fit.baseline.params()[0]).abs() < 1e-8);
        let se4 = gamma_se(&ds4, &fit4.baseline, &theta4).unwrap();
        assert!(se1.positive_definite && se4.positive_definite);
        assert!((se4.se[0] / se1.se[0] - 0.5).abs() < 1e-5);
    }
}
