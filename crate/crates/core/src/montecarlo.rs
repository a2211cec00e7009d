//! Replicated simulation studies: bias, spread, standard-error calibration
//! and interval coverage of `γ̂`, and interior MSE of `m̂`.

use std::collections::BTreeMap;
use std::io::Write;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline::Baseline;
use crate::data::Dataset;
use crate::model::{estimate_gamma, normal_quantile, smooth_m, FitConfig, FitError, MCurve};
use crate::simulate::{self, replication_seed, MFunction, SimulateError, SimulationConfig};

/// Replications may fail at most this share before a row is flagged.
pub const MAX_FAILURE_SHARE: f64 = 0.01;

/// Default MSE window.
pub const INTERIOR: (f64, f64) = (1.3, 3.7);

const EDGE_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum MonteCarloError {
    #[error("number of replications must be at least 1")]
    NoReplications,
    #[error("study needs at least one bandwidth row")]
    NoRows,
    #[error("no grid points inside [{0}, {1}]")]
    EmptyInterval(f64, f64),
    #[error("length mismatch: {0} estimates, {1} standard errors")]
    LengthMismatch(usize, usize),
    #[error("fit family {fit:?} differs from the generating family {truth:?}")]
    FamilyMismatch { fit: crate::baseline::FamilyKind, truth: crate::baseline::FamilyKind },
    #[error(transparent)]
    Simulate(#[from] SimulateError),
    #[error(transparent)]
    Fit(#[from] FitError),
}

/// Bandwidths for the `γ` stage and the final `m` smoothing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub h_gamma: f64,
    pub h_m: f64,
}

impl StudyRow {
    pub fn same(h: f64) -> Self {
        Self { h_gamma: h, h_m: h }
    }
}

/// One row per bandwidth, both stages sharing it.
pub fn table_rows(hs: &[f64]) -> Vec<StudyRow> {
    hs.iter().map(|h| StudyRow::same(*h)).collect()
}

/// `h_gamma = 0.2`, then `h_m ∈ {0.4, 0.6}`.
pub fn example3_rows() -> Vec<StudyRow> {
    vec![StudyRow { h_gamma: 0.2, h_m: 0.4 }, StudyRow { h_gamma: 0.2, h_m: 0.6 }]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowSummary {
    pub h_gamma: f64,
    pub h_m: f64,
    pub reps: usize,
    pub failed: usize,
    pub mean_gamma: f64,
    pub sd_gamma: Option<f64>,
    pub mean_se: f64,
    pub coverage: f64,
    pub mse_known: f64,
    pub mse_known_sd: Option<f64>,
    pub mse_est: f64,
    pub mse_est_sd: Option<f64>,
}

impl RowSummary {
    pub fn successes(&self) -> usize {
        self.reps - self.failed
    }

    pub fn is_valid(&self) -> bool {
        (self.failed as f64) < MAX_FAILURE_SHARE * self.reps as f64 || self.failed == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub gamma_true: f64,
    pub ci_level: f64,
    pub base_seed: u64,
    pub n: usize,
    pub reps: usize,
    pub mean_cure_fraction: f64,
    pub mean_censoring_fraction: f64,
    pub rows: Vec<RowSummary>,
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.digits$}"))
}

impl MonteCarloReport {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(
            out,
            "h_gamma,h_m,reps,failed,mean_gamma,sd_gamma,mean_se,coverage,mse_known,mse_known_sd,mse_est,mse_est_sd,cure_fraction,censoring_fraction"
        )?;
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.h_gamma,
                r.h_m,
                r.reps,
                r.failed,
                r.mean_gamma,
                opt(r.sd_gamma),
                r.mean_se,
                r.coverage,
                r.mse_known,
                opt(r.mse_known_sd),
                r.mse_est,
                opt(r.mse_est_sd),
                self.mean_cure_fraction,
                self.mean_censoring_fraction
            )?;
        }
        Ok(())
    }

    /// Aligned table in the column order of the published summaries.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "gamma0 = {}, n = {}, reps = {}, cure {:.1}%, censored {:.1}%\n",
            self.gamma_true,
            self.n,
            self.reps,
            100.0 * self.mean_cure_fraction,
            100.0 * self.mean_censoring_fraction
        );
        s.push_str(&format!(
            "{:>7} {:>7} {:>9} {:>7} {:>7} {:>9} {:>17} {:>17} {:>7}\n",
            "h_gamma", "h_m", "mean", "sd", "se", "coverage", "MSE known (sd)", "MSE est (sd)", "failed"
        ));
        for r in &self.rows {
            let known = format!("{:.3} ({})", r.mse_known, fmt_opt(r.mse_known_sd, 3));
            let est = format!("{:.3} ({})", r.mse_est, fmt_opt(r.mse_est_sd, 3));
            s.push_str(&format!(
                "{:>7} {:>7} {:>9.3} {:>7} {:>7.3} {:>8.1}% {:>17} {:>17} {:>7}\n",
                r.h_gamma,
                r.h_m,
                r.mean_gamma,
                fmt_opt(r.sd_gamma, 3),
                r.mean_se,
                100.0 * r.coverage,
                known,
                est,
                r.failed
            ));
        }
        s
    }
}

/// Mean of `(m̂(x) − m(x))²` over grid points inside `interval`.
pub fn mse_interior<F: Fn(f64) -> f64>(
    xs: &[f64],
    m_hat: &[f64],
    m_true: F,
    interval: (f64, f64),
) -> Result<f64, MonteCarloError> {
    if xs.len() != m_hat.len() {
        return Err(MonteCarloError::LengthMismatch(xs.len(), m_hat.len()));
    }
    let (lo, hi) = interval;
    let (sum, count) = xs
        .iter()
        .zip(m_hat)
        .filter(|(x, _)| **x >= lo - EDGE_TOL && **x <= hi + EDGE_TOL)
        .fold((0.0, 0usize), |(s, c), (x, m)| (s + (m - m_true(*x)).powi(2), c + 1));
    if count == 0 {
        return Err(MonteCarloError::EmptyInterval(lo, hi));
    }
    Ok(sum / count as f64)
}

/// Share of replications with `|γ̂ − γ₀| ≤ z·ŝe`.
pub fn coverage(gamma_hats: &[f64], ses: &[f64], truth: f64, level: f64) -> Result<f64, MonteCarloError> {
    if gamma_hats.len() != ses.len() {
        return Err(MonteCarloError::LengthMismatch(gamma_hats.len(), ses.len()));
    }
    if gamma_hats.is_empty() {
        return Err(MonteCarloError::NoReplications);
    }
    let z = normal_quantile(level);
    let hits = gamma_hats.iter().zip(ses).filter(|(g, s)| (*g - truth).abs() <= z * *s).count();
    Ok(hits as f64 / gamma_hats.len() as f64)
}

/// `Σ Δᵢ / Σ F(Yᵢ)` over subjects with `|Xᵢ − x| ≤ width / 2`; cured
/// subjects contribute `F(∞) = 1`. `None` if the bin is empty.
pub fn binned_moment_ratio(ds: &Dataset, baseline: &Baseline, x: f64, width: f64) -> Option<f64> {
    let (num, den, count) = ds
        .subjects()
        .iter()
        .filter(|s| (s.covariate - x).abs() <= width / 2.0)
        .fold((0.0, 0.0, 0usize), |(n, d, c), s| (n + s.status.delta(), d + baseline.cdf(s.time), c + 1));
    (count > 0 && den > 0.0).then(|| num / den)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_sd(v: &[f64]) -> Option<f64> {
    if v.len() < 2 {
        return None;
    }
    let m = mean(v);
    Some((v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt())
}

#[derive(Debug, Clone, Copy)]
struct RowOutcome {
    gamma_hat: f64,
    se: f64,
    mse_known: f64,
    mse_est: f64,
}

struct Replication {
    cure_fraction: f64,
    censoring_fraction: f64,
    rows: Vec<Option<RowOutcome>>,
}

fn curve_mse(curve: &MCurve, m_fn: &MFunction, interval: (f64, f64)) -> Option<f64> {
    let inside = |x: f64| x >= interval.0 - EDGE_TOL && x <= interval.1 + EDGE_TOL;
    if curve.failed.iter().any(|x| inside(*x)) {
        return None;
    }
    mse_interior(&curve.xs(), &curve.m_values(), |x| m_fn.eval(x), interval).ok()
}

fn run_replication(
    sim: &SimulationConfig,
    rows: &[StudyRow],
    cfg: &FitConfig,
    seed: u64,
    interval: (f64, f64),
) -> Result<Replication, MonteCarloError> {
    let data = simulate::generate(&sim.clone().with_seed(seed))?;
    let ds = &data.dataset;
    let mut stages: BTreeMap<u64, Option<(Baseline, f64)>> = BTreeMap::new();
    let mut known: BTreeMap<u64, Option<f64>> = BTreeMap::new();

    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let stage = *stages.entry(row.h_gamma.to_bits()).or_insert_with(|| {
            match estimate_gamma(ds, cfg, row.h_gamma) {
                Ok(st) if st.se.positive_definite && st.se.se[0].is_finite() => Some((st.baseline, st.se.se[0])),
                Ok(_) => None,
                Err(e) => {
                    log::debug!("replication seed {seed}: gamma stage failed: {e}");
                    None
                }
            }
        });
        let mse_known = *known.entry(row.h_m.to_bits()).or_insert_with(|| {
            smooth_m(ds, cfg, &sim.baseline, row.h_m).ok().and_then(|c| curve_mse(&c, &sim.m_fn, interval))
        });
        let outcome = stage.and_then(|(baseline, se)| {
            let curve = smooth_m(ds, cfg, &baseline, row.h_m).ok()?;
            Some(RowOutcome {
                gamma_hat: baseline.params()[0],
                se,
                mse_known: mse_known?,
                mse_est: curve_mse(&curve, &sim.m_fn, interval)?,
            })
        });
        out.push(outcome);
    }
    Ok(Replication { cure_fraction: data.cure_fraction, censoring_fraction: data.censoring_fraction, rows: out })
}

/// Study settings beyond the generating model.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub rows: Vec<StudyRow>,
    pub reps: usize,
    pub fit: FitConfig,
    pub base_seed: u64,
    pub interval: (f64, f64),
}

impl StudyConfig {
    /// Fits on the covariate support, MSE on [`INTERIOR`].
    pub fn new(sim: &SimulationConfig, rows: Vec<StudyRow>, reps: usize, base_seed: u64) -> Self {
        let fit = FitConfig {
            grid_range: Some(sim.covariate_law.range()),
            family: sim.baseline.kind(),
            ..FitConfig::default()
        };
        Self { rows, reps, fit, base_seed, interval: INTERIOR }
    }
}

/// Runs `study.reps` replications of `sim`; replication `r` uses seed
/// `replication_seed(base_seed, r)`.
pub fn run_study(sim: &SimulationConfig, study: &StudyConfig) -> Result<MonteCarloReport, MonteCarloError> {
    if study.reps == 0 {
        return Err(MonteCarloError::NoReplications);
    }
    if study.rows.is_empty() {
        return Err(MonteCarloError::NoRows);
    }
    if study.fit.family != sim.baseline.kind() {
        return Err(MonteCarloError::FamilyMismatch { fit: study.fit.family, truth: sim.baseline.kind() });
    }
    sim.validate()?;
    study.fit.validate()?;

    let reps: Vec<Replication> = (0..study.reps as u64)
        .into_par_iter()
        .map(|r| run_replication(sim, &study.rows, &study.fit, replication_seed(study.base_seed, r), study.interval))
        .collect::<Result<_, _>>()?;

    let gamma_true = sim.baseline.params()[0];
    let ci_level = study.fit.ci_level;
    let mut rows = Vec::with_capacity(study.rows.len());
    for (k, row) in study.rows.iter().enumerate() {
        let ok: Vec<RowOutcome> = reps.iter().filter_map(|r| r.rows[k]).collect();
        let failed = study.reps - ok.len();
        if ok.is_empty() {
            return Err(MonteCarloError::Fit(FitError::NoConvergedPoints));
        }
        let g: Vec<f64> = ok.iter().map(|o| o.gamma_hat).collect();
        let se: Vec<f64> = ok.iter().map(|o| o.se).collect();
        let mk: Vec<f64> = ok.iter().map(|o| o.mse_known).collect();
        let me: Vec<f64> = ok.iter().map(|o| o.mse_est).collect();
        let summary = RowSummary {
            h_gamma: row.h_gamma,
            h_m: row.h_m,
            reps: study.reps,
            failed,
            mean_gamma: mean(&g),
            sd_gamma: sample_sd(&g),
            mean_se: mean(&se),
            coverage: coverage(&g, &se, gamma_true, ci_level)?,
            mse_known: mean(&mk),
            mse_known_sd: sample_sd(&mk),
            mse_est: mean(&me),
            mse_est_sd: sample_sd(&me),
        };
        if !summary.is_valid() {
            warn!(
                "row h_gamma={} h_m={}: {} of {} replications failed",
                row.h_gamma, row.h_m, failed, study.reps
            );
        }
        rows.push(summary);
    }
    let cure: Vec<f64> = reps.iter().map(|r| r.cure_fraction).collect();
    let cens: Vec<f64> = reps.iter().map(|r| r.censoring_fraction).collect();
    Ok(MonteCarloReport {
        gamma_true,
        ci_level,
        base_seed: study.base_seed,
        n: sim.n,
        reps: study.reps,
        mean_cure_fraction: mean(&cure),
        mean_censoring_fraction: mean(&cens),
        rows,
    })
}
