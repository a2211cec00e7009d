//! Synthetic data from the promotion-time cure model.
//!
//! Each subject draws its covariate, its cure uniform and its censoring time
//! from its own ChaCha20 substream keyed by `(seed, subject index)`, so a
//! dataset is reproducible and independent of generation order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline::Baseline;
use crate::data::{Dataset, Status, Subject};

#[derive(Debug, Error, PartialEq)]
pub enum SimulateError {
    #[error("unknown built-in example {0} (expected 1, 2 or 3)")]
    UnknownExample(u32),
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
}

/// Piecewise polynomial; piece `j` covers `[breaks[j], breaks[j+1])` and is
/// evaluated in powers of `x − breaks[j]`. Values outside the breaks use
/// the nearest piece.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewisePolynomial {
    pub breaks: Vec<f64>,
    pub coefficients: Vec<Vec<f64>>,
}

impl PiecewisePolynomial {
    pub fn new(breaks: Vec<f64>, coefficients: Vec<Vec<f64>>) -> Result<Self, SimulateError> {
        if breaks.len() < 2 || coefficients.len() != breaks.len() - 1 {
            return Err(SimulateError::InvalidConfig(format!(
                "piecewise polynomial needs k+1 breaks for k pieces (got {} breaks, {} pieces)",
                breaks.len(),
                coefficients.len()
            )));
        }
        if breaks.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(SimulateError::InvalidConfig("breaks must be strictly increasing".into()));
        }
        if coefficients.iter().any(Vec::is_empty) {
            return Err(SimulateError::InvalidConfig("every piece needs at least one coefficient".into()));
        }
        Ok(Self { breaks, coefficients })
    }

    pub fn eval(&self, x: f64) -> f64 {
        let pieces = self.coefficients.len();
        let j = self.breaks[1..pieces].partition_point(|b| *b <= x);
        let d = x - self.breaks[j];
        self.coefficients[j].iter().rev().fold(0.0, |acc, c| acc * d + c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MFunction {
    /// `1 + sin(2x)`
    Expr1,
    /// `sin(2x)`
    Expr2,
    Constant { value: f64 },
    Piecewise(PiecewisePolynomial),
}

impl MFunction {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            MFunction::Expr1 => 1.0 + (2.0 * x).sin(),
            MFunction::Expr2 => (2.0 * x).sin(),
            MFunction::Constant { value } => *value,
            MFunction::Piecewise(p) => p.eval(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CovariateLaw {
    Uniform { a: f64, b: f64 },
}

impl CovariateLaw {
    fn from_unit(&self, u: f64) -> f64 {
        match *self {
            CovariateLaw::Uniform { a, b } => a + (b - a) * u,
        }
    }

    pub fn range(&self) -> (f64, f64) {
        match *self {
            CovariateLaw::Uniform { a, b } => (a, b),
        }
    }
}

/// Censoring distribution, independent of the covariate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CensoringLaw {
    /// `C ~ U(0, max)`
    Uniform { max: f64 },
}

impl CensoringLaw {
    fn from_unit(&self, u: f64) -> f64 {
        match *self {
            CensoringLaw::Uniform { max } => max * u,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub m_fn: MFunction,
    pub covariate_law: CovariateLaw,
    pub baseline: Baseline,
    pub censoring_law: CensoringLaw,
    pub n: usize,
    pub seed: u64,
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<(), SimulateError> {
        let bad = |m: String| Err(SimulateError::InvalidConfig(m));
        if self.n == 0 {
            return bad("n must be at least 1".into());
        }
        let CovariateLaw::Uniform { a, b } = self.covariate_law;
        if !(a.is_finite() && b.is_finite() && a < b) {
            return bad(format!("covariate law U({a}, {b}) is degenerate"));
        }
        let CensoringLaw::Uniform { max } = self.censoring_law;
        if !(max.is_finite() && max > 0.0) {
            return bad(format!("censoring law U(0, {max}) is degenerate"));
        }
        Ok(())
    }

    pub fn with_n(mut self, n: usize) -> Self {
        self.n = n;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Maps one subject's three unit draws to an observation.
    ///
    /// Returns the subject, the true `m(X)` and whether it was generated as
    /// cured.
    pub fn transform_draws(&self, u_x: f64, u_cure: f64, u_c: f64) -> (Subject, f64, bool) {
        let x = self.covariate_law.from_unit(u_x);
        let m = self.m_fn.eval(x);
        let theta = m.exp();
        let p_cure = (-theta).exp();
        let level = -u_cure.ln() / theta;
        // level >= 1 only at u_cure == p_cure up to rounding
        if u_cure < p_cure || !(level < 1.0) {
            return (Subject::cured(x), m, true);
        }
        let t = self.baseline.quantile(level).expect("level lies in [0, 1)");
        let c = self.censoring_law.from_unit(u_c);
        let subject = if t < c { Subject::event(t, x) } else { Subject::censored(c, x) };
        (subject, m, false)
    }
}

/// Generated data plus the truth behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedDataset {
    pub dataset: Dataset,
    pub m_true: Vec<f64>,
    pub cured_true: Vec<bool>,
    /// Censoring draw of every subject, cured ones included.
    pub censoring_times: Vec<f64>,
    pub cure_fraction: f64,
    /// Share of subjects that are censored or cured.
    pub censoring_fraction: f64,
}

impl SimulatedDataset {
    /// The same draws with every cured subject censored at its own
    /// censoring time instead of recorded as cured.
    pub fn follow_up_dataset(&self) -> Dataset {
        let subjects = self
            .dataset
            .subjects()
            .iter()
            .zip(&self.censoring_times)
            .map(|(s, c)| if s.is_cured() { Subject::censored(*c, s.covariate) } else { *s })
            .collect();
        Dataset::new(subjects).expect("follow-up subjects are valid")
    }

    /// Writes `x,m_true,cured_true`.
    pub fn write_truth_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "x,m_true,cured_true")?;
        for ((s, m), c) in self.dataset.subjects().iter().zip(&self.m_true).zip(&self.cured_true) {
            writeln!(out, "{},{},{}", s.covariate, m, u8::from(*c))?;
        }
        Ok(())
    }
}

/// splitmix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of replication `rep` in a study with `base_seed`.
pub fn replication_seed(base_seed: u64, rep: u64) -> u64 {
    mix64(mix64(base_seed) ^ mix64(rep.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

/// Independent generator for subject `index` of the dataset with `seed`.
pub fn subject_rng(seed: u64, index: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn generate(cfg: &SimulationConfig) -> Result<SimulatedDataset, SimulateError> {
    cfg.validate()?;
    let mut subjects = Vec::with_capacity(cfg.n);
    let mut m_true = Vec::with_capacity(cfg.n);
    let mut cured_true = Vec::with_capacity(cfg.n);
    let mut censoring_times = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let mut rng = subject_rng(cfg.seed, i as u64);
        let u_x: f64 = rng.random();
        let u_cure: f64 = rng.random();
        let u_c: f64 = rng.random();
        let (s, m, cured) = cfg.transform_draws(u_x, u_cure, u_c);
        subjects.push(s);
        m_true.push(m);
        cured_true.push(cured);
        censoring_times.push(cfg.censoring_law.from_unit(u_c));
    }
    let n = cfg.n as f64;
    let cure_fraction = cured_true.iter().filter(|c| **c).count() as f64 / n;
    let censoring_fraction = subjects.iter().filter(|s| s.status != Status::Event).count() as f64 / n;
    let dataset = Dataset::new(subjects).expect("generated subjects are valid");
    Ok(SimulatedDataset { dataset, m_true, cured_true, censoring_times, cure_fraction, censoring_fraction })
}

/// The three reference configurations (n = 200, seed 0).
pub fn builtin_example(id: u32) -> Result<SimulationConfig, SimulateError> {
    let (m_fn, censor_max) = match id {
        1 => (MFunction::Expr1, 1.0),
        2 => (MFunction::Expr2, 1.0),
        3 => (MFunction::Expr1, 0.4),
        other => return Err(SimulateError::UnknownExample(other)),
    };
    Ok(SimulationConfig {
        m_fn,
        covariate_law: CovariateLaw::Uniform { a: 1.0, b: 4.0 },
        baseline: Baseline::Exponential { rate: 7.0 },
        censoring_law: CensoringLaw::Uniform { max: censor_max },
        n: 200,
        seed: 0,
    })
}
