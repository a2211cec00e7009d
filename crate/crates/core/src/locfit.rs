//! Local polynomial likelihood for `m(x) = log θ(x)` at fixed baseline
//! parameters.
//!
//! At a point `x` the local log-likelihood is
//!
//! ```text
//! n⁻¹ Σ { Δᵢ [x̃ᵢᵀβ + log f(Yᵢ)] − exp(x̃ᵢᵀβ) F(Yᵢ) } K_h(Xᵢ − x)
//! ```
//!
//! with `x̃ᵢ = (1, Xᵢ − x, …, (Xᵢ − x)^p)`. It is concave in `β`, strictly so
//! once the window carries `p + 1` distinct covariates with `F(Yᵢ) > 0`, and
//! is maximized by a safeguarded Newton iteration.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline::Baseline;
use crate::data::{Dataset, Status};
use crate::kernel::{design_row, KernelSpec};

pub const SCORE_TOL: f64 = 1e-8;
pub const STEP_TOL: f64 = 1e-10;
/// Largest Newton step accepted as converged.
pub const NEWTON_STEP_TOL: f64 = 1e-9;
pub const MAX_ITER: usize = 100;
/// Intercept magnitude beyond which the fit is treated as running off to
/// the flat `exp(β₀) ≈ 0` ridge.
pub const INTERCEPT_CAP: f64 = 50.0;
const MAX_HALVINGS: usize = 60;

#[derive(Debug, Clone, Error, PartialEq, Serialize, Deserialize)]
pub enum LocfitError {
    #[error("window at x = {x} has {usable} usable covariate values, need {needed}")]
    RankDeficientWindow { x: f64, usable: usize, needed: usize },
    #[error("local Newton did not converge at x = {x} after {iterations} iterations")]
    NonConvergence { x: f64, iterations: usize },
    #[error("local information matrix is singular")]
    SingularInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalCoefficients {
    pub x: f64,
    /// `(m(x), m'(x), …, m^(p)(x)/p!)` estimates.
    pub beta: DVector<f64>,
    /// Observed local information, summed over subjects (no `n⁻¹`).
    pub info: DMatrix<f64>,
    /// Number of subjects with positive kernel weight.
    pub ess: usize,
    pub converged: bool,
    pub iterations: usize,
}

impl LocalCoefficients {
    pub fn m_hat(&self) -> f64 {
        self.beta[0]
    }
}

struct WindowTerm {
    row: DVector<f64>,
    offset: f64,
    delta: f64,
    cdf: f64,
    log_pdf: f64,
    weight: f64,
}

/// The local likelihood at one point, with baseline quantities cached for
/// the subjects inside the kernel window.
pub struct LocalProblem {
    x: f64,
    n: f64,
    degree: usize,
    terms: Vec<WindowTerm>,
}

impl LocalProblem {
    pub fn new(ds: &Dataset, baseline: &Baseline, x: f64, kernel: &KernelSpec, degree: usize) -> Self {
        let terms = ds
            .subjects()
            .iter()
            .filter_map(|s| {
                let offset = s.covariate - x;
                let weight = kernel.weight(offset);
                if weight <= 0.0 {
                    return None;
                }
                let (delta, log_pdf) = match s.status {
                    Status::Event => (1.0, baseline.log_pdf(s.time).expect("event times are finite")),
                    _ => (0.0, 0.0),
                };
                Some(WindowTerm {
                    row: design_row(x, s.covariate, degree),
                    offset,
                    delta,
                    cdf: baseline.cdf(s.time),
                    log_pdf,
                    weight,
                })
            })
            .collect();
        Self { x, n: ds.len() as f64, degree, terms }
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn window_size(&self) -> usize {
        self.terms.len()
    }

    /// Distinct covariate offsets carrying positive `F · K` weight.
    pub fn usable_points(&self) -> usize {
        let mut offsets: Vec<f64> = self
            .terms
            .iter()
            .filter(|t| t.cdf > 0.0)
            .map(|t| t.offset)
            .collect();
        offsets.sort_by(f64::total_cmp);
        offsets.dedup();
        offsets.len()
    }

    /// β-dependent part of the local log-likelihood.
    pub fn objective(&self, beta: &DVector<f64>) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                let eta = t.row.dot(beta);
                (t.delta * eta - eta.exp() * t.cdf) * t.weight
            })
            .sum::<f64>()
            / self.n
    }

    pub fn loglik(&self, beta: &DVector<f64>) -> f64 {
        let constant: f64 = self.terms.iter().map(|t| t.delta * t.log_pdf * t.weight).sum::<f64>() / self.n;
        self.objective(beta) + constant
    }

    pub fn score(&self, beta: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(self.degree + 1);
        for t in &self.terms {
            let resid = t.delta - t.row.dot(beta).exp() * t.cdf;
            g.axpy(resid * t.weight, &t.row, 1.0);
        }
        g / self.n
    }

    /// Information summed over subjects: `Σ exp(x̃ᵀβ) F x̃ x̃ᵀ K_h`.
    pub fn info_sum(&self, beta: &DVector<f64>) -> DMatrix<f64> {
        let p1 = self.degree + 1;
        let mut info = DMatrix::zeros(p1, p1);
        for t in &self.terms {
            let c = t.row.dot(beta).exp() * t.cdf * t.weight;
            info.ger(c, &t.row, &t.row, 1.0);
        }
        info
    }

    pub fn hessian(&self, beta: &DVector<f64>) -> DMatrix<f64> {
        -self.info_sum(beta) / self.n
    }

    pub fn maximize(&self, beta_init: &DVector<f64>) -> Result<LocalCoefficients, LocfitError> {
        self.maximize_traced(beta_init, None)
    }

    /// Newton ascent with step halving. When `trace` is given, the objective
    /// at the start and after every accepted step is appended to it.
    pub fn maximize_traced(
        &self,
        beta_init: &DVector<f64>,
        mut trace: Option<&mut Vec<f64>>,
    ) -> Result<LocalCoefficients, LocfitError> {
        assert_eq!(beta_init.len(), self.degree + 1, "initial coefficients must have length p + 1");
        let needed = self.degree + 1;
        let usable = self.usable_points();
        if usable < needed {
            return Err(LocfitError::RankDeficientWindow { x: self.x, usable, needed });
        }
        if self.terms.iter().all(|t| t.delta == 0.0) {
            // supremum at β₀ → −∞
            let mut beta = DVector::zeros(needed);
            beta[0] = -INTERCEPT_CAP;
            return Ok(self.finish(beta, false, 0));
        }

        let mut beta = beta_init.clone();
        let mut obj = self.objective(&beta);
        if !obj.is_finite() {
            beta = DVector::zeros(needed);
            obj = self.objective(&beta);
        }
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(obj);
        }

        for iteration in 0..MAX_ITER {
            let g = self.score(&beta);
            let info = self.info_sum(&beta) / self.n;
            let Some(chol) = info.cholesky() else {
                return Err(LocfitError::RankDeficientWindow { x: self.x, usable, needed });
            };
            let dir = chol.solve(&g);
            if g.amax() < SCORE_TOL && dir.amax() < NEWTON_STEP_TOL {
                return Ok(self.finish(beta, true, iteration));
            }

            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..MAX_HALVINGS {
                let cand = &beta + &dir * t;
                let o = self.objective(&cand);
                if o.is_finite() && o >= obj {
                    accepted = Some((cand, o));
                    break;
                }
                t *= 0.5;
            }
            let Some((cand, o)) = accepted else {
                // no ascent possible at working precision
                return Ok(self.finish(beta, true, iteration + 1));
            };
            let step = (&cand - &beta).norm();
            beta = cand;
            obj = o;
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(obj);
            }
            if beta[0].abs() > INTERCEPT_CAP {
                beta[0] = beta[0].clamp(-INTERCEPT_CAP, INTERCEPT_CAP);
                return Ok(self.finish(beta, false, iteration + 1));
            }
            if step < STEP_TOL {
                return Ok(self.finish(beta, true, iteration + 1));
            }
        }
        Err(LocfitError::NonConvergence { x: self.x, iterations: MAX_ITER })
    }

    fn finish(&self, beta: DVector<f64>, converged: bool, iterations: usize) -> LocalCoefficients {
        LocalCoefficients {
            x: self.x,
            info: self.info_sum(&beta),
            beta,
            ess: self.terms.len(),
            converged,
            iterations,
        }
    }
}

pub fn local_loglik(ds: &Dataset, baseline: &Baseline, x: f64, beta: &DVector<f64>, kernel: &KernelSpec) -> f64 {
    LocalProblem::new(ds, baseline, x, kernel, beta.len() - 1).loglik(beta)
}

pub fn local_score(
    ds: &Dataset,
    baseline: &Baseline,
    x: f64,
    beta: &DVector<f64>,
    kernel: &KernelSpec,
) -> DVector<f64> {
    LocalProblem::new(ds, baseline, x, kernel, beta.len() - 1).score(beta)
}

pub fn local_hessian(
    ds: &Dataset,
    baseline: &Baseline,
    x: f64,
    beta: &DVector<f64>,
    kernel: &KernelSpec,
) -> DMatrix<f64> {
    LocalProblem::new(ds, baseline, x, kernel, beta.len() - 1).hessian(beta)
}

pub fn maximize_local(
    ds: &Dataset,
    baseline: &Baseline,
    x: f64,
    kernel: &KernelSpec,
    beta_init: &DVector<f64>,
) -> Result<LocalCoefficients, LocfitError> {
    LocalProblem::new(ds, baseline, x, kernel, beta_init.len() - 1).maximize(beta_init)
}

/// Local fits over a grid, aligned with `grid`.
#[derive(Debug, Clone)]
pub struct GridFit {
    pub grid: Vec<f64>,
    pub points: Vec<Result<LocalCoefficients, LocfitError>>,
}

impl GridFit {
    /// Successfully converged points in grid order.
    pub fn converged(&self) -> impl Iterator<Item = &LocalCoefficients> {
        self.points.iter().filter_map(|p| p.as_ref().ok()).filter(|c| c.converged)
    }

    pub fn is_converged(&self, index: usize) -> bool {
        matches!(&self.points[index], Ok(c) if c.converged)
    }

    pub fn n_failed(&self) -> usize {
        self.points.len() - self.converged().count()
    }
}

/// Maximizes the local likelihood at every grid point.
///
/// With `warm_start` the sweep is sequential and each point starts from the
/// last converged neighbour; otherwise points are fitted independently in
/// parallel from `beta_init`.
pub fn fit_grid(
    ds: &Dataset,
    baseline: &Baseline,
    grid: &[f64],
    kernel: &KernelSpec,
    beta_init: &DVector<f64>,
    warm_start: bool,
) -> GridFit {
    let degree = beta_init.len() - 1;
    let points = if warm_start {
        let mut start = beta_init.clone();
        grid.iter()
            .map(|&x| {
                let res = LocalProblem::new(ds, baseline, x, kernel, degree).maximize(&start);
                if let Ok(c) = &res {
                    if c.converged {
                        start = c.beta.clone();
                    }
                }
                res
            })
            .collect()
    } else {
        grid.par_iter()
            .map(|&x| LocalProblem::new(ds, baseline, x, kernel, degree).maximize(beta_init))
            .collect()
    };
    GridFit { grid: grid.to_vec(), points }
}

/// Standard error of `m̂(x)` from the inverse local information.
///
/// This is the naive plug-in; it carries no `∫K²` factor, so it is not the
/// asymptotic variance of the kernel estimator.
pub fn pointwise_se_m(lc: &LocalCoefficients) -> Result<f64, LocfitError> {
    let inv = lc.info.clone().cholesky().ok_or(LocfitError::SingularInfo)?.inverse();
    let v = inv[(0, 0)];
    if v.is_finite() && v >= 0.0 {
        Ok(v.sqrt())
    } else {
        Err(LocfitError::SingularInfo)
    }
}
