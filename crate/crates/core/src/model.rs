//! Alternating estimation of the baseline parameters and the cure-rate
//! covariate effect, plus predictions from a fitted model.
//!
//! [`fit`] runs the full procedure:
//!
//! 1. start from the constant `m ≡ log(−log p̄)` and maximize the
//!    conditional likelihood to get an initial `γ`;
//! 2. with the current `γ`, fit the local likelihood at every data point
//!    with the (small) bandwidth `h_gamma`;
//! 3. update `γ` from the resulting `θ(Xᵢ)`;
//! 4. repeat 2–3 until both the `γ` change and the largest `θ(Xᵢ)` change
//!    fall below `tol`;
//! 5. smooth `m` on the display grid with `h_m` at the final `γ̂`.

use std::io::Write;

use log::warn;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::baseline::{Baseline, FamilyKind};
use crate::data::{DataError, Dataset, Status};
use crate::gammafit::{self, GammaFitError, GammaSe, ThetaAtData};
use crate::kernel::{make_grid, KernelError, KernelKind, KernelSpec};
use crate::locfit::{fit_grid, pointwise_se_m, LocfitError};

#[derive(Debug, Error)]
pub enum FitError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("no cured subjects: the observed cure fraction is 0 and log(-log p) is undefined")]
    NoCuredSubjects,
    #[error("every subject is cured: log(-log 1) is undefined")]
    UndefinedInitializer,
    #[error("the dataset has no events")]
    NoEvents,
    #[error("outer iteration did not converge after {iterations} iterations")]
    OuterNonConvergence { iterations: usize, history: Vec<OuterIteration> },
    #[error("every local fit failed")]
    NoConvergedPoints,
    #[error("x = {x} is outside the fitted range [{lo}, {hi}]")]
    OutOfRange { x: f64, lo: f64, hi: f64 },
    #[error("t = {t} lies outside [0, {zeta}]")]
    TimeOutOfRange { t: f64, zeta: f64 },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Gamma(#[from] GammaFitError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Locfit(#[from] LocfitError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub degree: usize,
    pub kernel: KernelKind,
    /// Step-2 bandwidth; defaults to `range · n^(-0.3)`.
    pub h_gamma: Option<f64>,
    /// Step-5 bandwidth; defaults to the step-2 bandwidth.
    pub h_m: Option<f64>,
    pub grid_points: usize,
    /// Display grid range; defaults to the covariate range.
    pub grid_range: Option<(f64, f64)>,
    pub cure_threshold: Option<f64>,
    pub family: FamilyKind,
    pub tol: f64,
    pub max_outer_iter: usize,
    pub ci_level: f64,
    pub warm_start: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            degree: 1,
            kernel: KernelKind::Epanechnikov,
            h_gamma: None,
            h_m: None,
            grid_points: 301,
            grid_range: None,
            cure_threshold: None,
            family: FamilyKind::Exponential,
            tol: 1e-4,
            max_outer_iter: 50,
            ci_level: 0.95,
            warm_start: false,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), FitError> {
        let bad = |msg: String| Err(FitError::InvalidConfig(msg));
        for (name, h) in [("h_gamma", self.h_gamma), ("h_m", self.h_m)] {
            if let Some(h) = h {
                if !(h.is_finite() && h > 0.0) {
                    return bad(format!("{name} must be positive, got {h}"));
                }
            }
        }
        if !(self.tol > 0.0) {
            return bad(format!("tol must be positive, got {}", self.tol));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return bad(format!("ci_level must lie in (0, 1), got {}", self.ci_level));
        }
        if self.grid_points < 2 {
            return bad(format!("grid_points must be at least 2, got {}", self.grid_points));
        }
        if self.max_outer_iter == 0 {
            return bad("max_outer_iter must be at least 1".into());
        }
        if let Some(z) = self.cure_threshold {
            if !(z > 0.0) {
                return bad(format!("cure_threshold must be positive, got {z}"));
            }
        }
        if let Some((lo, hi)) = self.grid_range {
            if !(lo < hi) {
                return bad(format!("grid range ({lo}, {hi}) is degenerate"));
            }
        }
        Ok(())
    }

    /// Non-fatal configuration concerns.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.degree % 2 == 0 {
            out.push(format!(
                "local polynomial degree {} is even; odd degrees are recommended for estimating m(x)",
                self.degree
            ));
        }
        out
    }

    pub fn default_h_gamma(n: usize, range: (f64, f64)) -> f64 {
        (range.1 - range.0) * (n as f64).powf(-0.3)
    }

    pub fn resolved_h_gamma(&self, ds: &Dataset) -> f64 {
        self.h_gamma.unwrap_or_else(|| Self::default_h_gamma(ds.len(), ds.covariate_range()))
    }

    pub fn resolved_h_m(&self, ds: &Dataset) -> f64 {
        self.h_m.unwrap_or_else(|| self.resolved_h_gamma(ds))
    }

    pub fn z_value(&self) -> f64 {
        normal_quantile(self.ci_level)
    }
}

/// Two-sided standard normal critical value for `level`.
pub fn normal_quantile(level: f64) -> f64 {
    Normal::standard().inverse_cdf(1.0 - (1.0 - level) / 2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterIteration {
    pub gamma: Vec<f64>,
    pub gamma_delta: f64,
    pub theta_delta: f64,
    /// Data points whose local fit failed and were left out of the update.
    pub excluded: usize,
}

/// Result of steps 1–4.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaStage {
    pub baseline: Baseline,
    pub se: GammaSe,
    pub history: Vec<OuterIteration>,
    pub initial: Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub x: f64,
    pub m_hat: f64,
    pub se_m: f64,
    pub theta_hat: f64,
    pub cure: f64,
    pub cure_lo: f64,
    pub cure_hi: f64,
}

impl CurvePoint {
    fn new(x: f64, m_hat: f64, se_m: f64, z: f64) -> Self {
        Self {
            x,
            m_hat,
            se_m,
            theta_hat: m_hat.exp(),
            cure: cure_from_m(m_hat),
            cure_lo: cure_from_m(m_hat + z * se_m),
            cure_hi: cure_from_m(m_hat - z * se_m),
        }
    }
}

fn cure_from_m(m: f64) -> f64 {
    (-m.exp()).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Step-5 output: the `m̂` curve on the display grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCurve {
    pub points: Vec<CurvePoint>,
    /// Grid locations with no usable local fit.
    pub failed: Vec<f64>,
    pub bandwidth: f64,
}

impl MCurve {
    pub fn xs(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.x).collect()
    }

    pub fn m_values(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.m_hat).collect()
    }

    pub fn range(&self) -> Option<(f64, f64)> {
        Some((self.points.first()?.x, self.points.last()?.x))
    }

    /// Linear interpolation of `(m̂, se)` at `x`; `None` outside the range.
    pub fn interpolate(&self, x: f64) -> Option<(f64, f64)> {
        let pts = &self.points;
        let (lo, hi) = self.range()?;
        if !(x >= lo && x <= hi) {
            return None;
        }
        let k = pts.partition_point(|p| p.x < x);
        if k < pts.len() && pts[k].x == x {
            return Some((pts[k].m_hat, pts[k].se_m));
        }
        let (a, b) = (&pts[k - 1], &pts[k]);
        let w = (x - a.x) / (b.x - a.x);
        Some((a.m_hat + w * (b.m_hat - a.m_hat), a.se_m + w * (b.se_m - a.se_m)))
    }

    fn interpolate_clamped(&self, x: f64) -> Option<f64> {
        let (lo, hi) = self.range()?;
        self.interpolate(x.clamp(lo, hi)).map(|(m, _)| m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub n: usize,
    pub n_events: usize,
    pub n_censored: usize,
    pub n_cured: usize,
    pub observed_cure_fraction: f64,
    pub h_gamma: Option<f64>,
    pub h_m: f64,
    pub z: f64,
    pub outer_iterations: usize,
    pub history: Vec<OuterIteration>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub gamma_hat: Baseline,
    /// `None` when the baseline was supplied rather than estimated.
    pub gamma_se: Option<GammaSe>,
    pub curve: MCurve,
    pub diagnostics: FitDiagnostics,
    pub config: FitConfig,
}

fn prepare(ds: &Dataset, cfg: &FitConfig) -> Result<Dataset, FitError> {
    cfg.validate()?;
    for w in cfg.warnings() {
        warn!("{w}");
    }
    Ok(match cfg.cure_threshold {
        Some(z) => ds.apply_cure_threshold(z)?,
        None => ds.clone(),
    })
}

fn initial_intercept(ds: &Dataset) -> Result<f64, FitError> {
    let p = ds.observed_cure_fraction();
    if p == 0.0 {
        return Err(FitError::NoCuredSubjects);
    }
    if p == 1.0 {
        return Err(FitError::UndefinedInitializer);
    }
    Ok((-p.ln()).ln())
}

fn start_vector(beta0: f64, degree: usize) -> DVector<f64> {
    let mut b = DVector::zeros(degree + 1);
    b[0] = beta0;
    b
}

fn diagnostics(ds: &Dataset, h_gamma: Option<f64>, h_m: f64, z: f64, history: Vec<OuterIteration>) -> FitDiagnostics {
    FitDiagnostics {
        n: ds.len(),
        n_events: ds.count(Status::Event),
        n_censored: ds.count(Status::Censored),
        n_cured: ds.count(Status::Cured),
        observed_cure_fraction: ds.observed_cure_fraction(),
        h_gamma,
        h_m,
        z,
        outer_iterations: history.len(),
        history,
    }
}

/// Steps 1–4 on an already thresholded dataset.
pub fn estimate_gamma(ds: &Dataset, cfg: &FitConfig, h_gamma: f64) -> Result<GammaStage, FitError> {
    let beta0 = initial_intercept(ds)?;
    if ds.n_events() == 0 {
        return Err(FitError::NoEvents);
    }
    let kernel = KernelSpec::new(cfg.kernel, h_gamma)?;
    let init = start_vector(beta0, cfg.degree);

    let total_time: f64 = ds.subjects().iter().filter(|s| !s.is_cured()).map(|s| s.time).sum();
    let start = Baseline::moment_start(cfg.family, ds.n_events(), total_time);
    let theta0 = beta0.exp();
    let initial = gammafit::maximize_gamma(ds, &start, &ThetaAtData::constant(ds.len(), theta0)?)?.baseline;

    let data_points: Vec<f64> = ds.covariates().collect();
    let mut gamma = initial;
    let mut prev_theta: Vec<Option<f64>> = vec![Some(theta0); ds.len()];
    let mut history = Vec::new();

    for _ in 0..cfg.max_outer_iter {
        let grid = fit_grid(ds, &gamma, &data_points, &kernel, &init, cfg.warm_start);
        let theta: Vec<Option<f64>> = grid
            .points
            .iter()
            .map(|p| match p {
                Ok(c) if c.converged => Some(c.m_hat().exp()),
                _ => None,
            })
            .collect();
        let keep: Vec<bool> = theta.iter().map(Option::is_some).collect();
        let excluded = keep.iter().filter(|k| !**k).count();
        if excluded == ds.len() {
            return Err(FitError::NoConvergedPoints);
        }
        let (sub, sub_theta) = if excluded == 0 {
            (ds.clone(), ThetaAtData::new(theta.iter().flatten().copied().collect())?)
        } else {
            (ds.filter(|i, _| keep[i])?, ThetaAtData::new(theta.iter().flatten().copied().collect())?)
        };

        let next = gammafit::maximize_gamma(&sub, &gamma, &sub_theta)?.baseline;
        let gamma_delta = (next.params() - gamma.params()).amax();
        let theta_delta = theta
            .iter()
            .zip(&prev_theta)
            .filter_map(|(a, b)| Some((a.as_ref()? - b.as_ref()?).abs()))
            .fold(0.0, f64::max);
        history.push(OuterIteration { gamma: next.params().as_slice().to_vec(), gamma_delta, theta_delta, excluded });
        gamma = next;
        prev_theta = theta;

        if gamma_delta < cfg.tol && theta_delta < cfg.tol {
            let se = gammafit::gamma_se(&sub, &gamma, &sub_theta)?;
            return Ok(GammaStage { baseline: gamma, se, history, initial });
        }
    }
    Err(FitError::OuterNonConvergence { iterations: cfg.max_outer_iter, history })
}

/// Step 5: local fits of `m` on the display grid at fixed baseline.
pub fn smooth_m(ds: &Dataset, cfg: &FitConfig, baseline: &Baseline, h_m: f64) -> Result<MCurve, FitError> {
    let kernel = KernelSpec::new(cfg.kernel, h_m)?;
    let range = cfg.grid_range.unwrap_or_else(|| ds.covariate_range());
    let grid = make_grid(range, cfg.grid_points)?;
    let beta0 = initial_intercept(ds).unwrap_or(0.0);
    let fits = fit_grid(ds, baseline, &grid, &kernel, &start_vector(beta0, cfg.degree), cfg.warm_start);
    let z = cfg.z_value();

    let mut points = Vec::with_capacity(grid.len());
    let mut failed = Vec::new();
    for (x, res) in grid.iter().zip(&fits.points) {
        match res {
            Ok(c) if c.converged => match pointwise_se_m(c) {
                Ok(se) => points.push(CurvePoint::new(*x, c.m_hat(), se, z)),
                Err(_) => failed.push(*x),
            },
            _ => failed.push(*x),
        }
    }
    if points.is_empty() {
        return Err(FitError::NoConvergedPoints);
    }
    if !failed.is_empty() {
        warn!("{} of {} grid points have no usable local fit", failed.len(), grid.len());
    }
    Ok(MCurve { points, failed, bandwidth: h_m })
}

/// Runs the full alternating procedure.
pub fn fit(ds: &Dataset, cfg: &FitConfig) -> Result<FitResult, FitError> {
    let ds = prepare(ds, cfg)?;
    let h_gamma = cfg.resolved_h_gamma(&ds);
    let h_m = cfg.resolved_h_m(&ds);
    let stage = estimate_gamma(&ds, cfg, h_gamma)?;
    let curve = smooth_m(&ds, cfg, &stage.baseline, h_m)?;
    let mut config = cfg.clone();
    config.h_gamma = Some(h_gamma);
    config.h_m = Some(h_m);
    Ok(FitResult {
        gamma_hat: stage.baseline,
        gamma_se: Some(stage.se),
        curve,
        diagnostics: diagnostics(&ds, Some(h_gamma), h_m, cfg.z_value(), stage.history),
        config,
    })
}

/// Smooths `m` with the baseline held at `baseline` (steps 1–4 skipped).
pub fn fit_known_gamma(ds: &Dataset, cfg: &FitConfig, baseline: &Baseline) -> Result<FitResult, FitError> {
    let ds = prepare(ds, cfg)?;
    let h_m = cfg.resolved_h_m(&ds);
    let curve = smooth_m(&ds, cfg, baseline, h_m)?;
    let mut config = cfg.clone();
    config.h_m = Some(h_m);
    Ok(FitResult {
        gamma_hat: *baseline,
        gamma_se: None,
        curve,
        diagnostics: diagnostics(&ds, None, h_m, cfg.z_value(), Vec::new()),
        config,
    })
}

impl FitResult {
    fn m_at(&self, x: f64) -> Result<(f64, f64), FitError> {
        self.curve.interpolate(x).ok_or_else(|| {
            let (lo, hi) = self.curve.range().unwrap_or((f64::NAN, f64::NAN));
            FitError::OutOfRange { x, lo, hi }
        })
    }

    pub fn theta_at(&self, x: f64) -> Result<f64, FitError> {
        Ok(self.m_at(x)?.0.exp())
    }

    /// `exp(−θ̂(x))` with the band mapped from `m̂ ± z·se`.
    pub fn predict_cure_rate(&self, x: f64) -> Result<Band, FitError> {
        let (m, se) = self.m_at(x)?;
        let z = self.diagnostics.z;
        Ok(Band { point: cure_from_m(m), lo: cure_from_m(m + z * se), hi: cure_from_m(m - z * se) })
    }

    /// `exp(−θ̂(x) F(t; γ̂))`.
    pub fn predict_survival(&self, x: f64, t: f64) -> Result<f64, FitError> {
        check_time(t)?;
        Ok((-self.theta_at(x)? * self.gamma_hat.cdf(t)).exp())
    }

    /// Population hazard `θ̂(x) f(t; γ̂)`.
    pub fn predict_hazard(&self, x: f64, t: f64) -> Result<f64, FitError> {
        check_time(t)?;
        let f = self
            .gamma_hat
            .pdf(t)
            .map_err(|e| FitError::InvalidConfig(format!("hazard at t = {t}: {e}")))?;
        Ok(self.theta_at(x)? * f)
    }

    /// `n⁻¹ Σ exp(−θ̂(Xᵢ) F(t; γ̂))` over the subjects of `ds`.
    ///
    /// Covariates outside the fitted range use the nearest fitted value.
    pub fn mean_survival_curve(&self, ds: &Dataset, t_grid: &[f64]) -> Result<Vec<f64>, FitError> {
        let zeta = ds.cure_threshold().or(self.config.cure_threshold);
        let theta: Vec<f64> = ds
            .covariates()
            .map(|x| self.curve.interpolate_clamped(x).map(f64::exp).ok_or(FitError::NoConvergedPoints))
            .collect::<Result<_, _>>()?;
        t_grid
            .iter()
            .map(|&t| {
                check_time(t)?;
                if let Some(zeta) = zeta {
                    if t > zeta {
                        return Err(FitError::TimeOutOfRange { t, zeta });
                    }
                }
                let f = self.gamma_hat.cdf(t);
                Ok(theta.iter().map(|th| (-th * f).exp()).sum::<f64>() / theta.len() as f64)
            })
            .collect()
    }

    /// Writes `x,m_hat,se_m,theta_hat,cure,cure_lo,cure_hi`.
    pub fn write_curves_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "x,m_hat,se_m,theta_hat,cure,cure_lo,cure_hi")?;
        for p in &self.curve.points {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                p.x, p.m_hat, p.se_m, p.theta_hat, p.cure, p.cure_lo, p.cure_hi
            )?;
        }
        Ok(())
    }
}

fn check_time(t: f64) -> Result<(), FitError> {
    if t >= 0.0 {
        Ok(())
    } else {
        Err(FitError::TimeOutOfRange { t, zeta: f64::INFINITY })
    }
}
