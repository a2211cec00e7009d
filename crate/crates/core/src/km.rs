//! Product-limit survival estimate for overlaying on model curves.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, Status};

#[derive(Debug, Error, PartialEq)]
pub enum KmError {
    #[error("no observations")]
    Empty,
    #[error("{0} times but {1} event flags")]
    LengthMismatch(usize, usize),
    #[error("time {time} at index {index} must be finite and positive")]
    InvalidTime { index: usize, time: f64 },
}

/// Step function starting at `surv = 1` for `t = 0`, then one entry per
/// distinct event time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
    pub n_risk: Vec<usize>,
    pub n_event: Vec<usize>,
    /// Times of censored observations, sorted.
    pub censor_ticks: Vec<f64>,
}

impl KmCurve {
    /// `Ŝ(t)` as a right-continuous step function.
    pub fn eval(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|s| *s <= t);
        if k == 0 {
            1.0
        } else {
            self.survival[k - 1]
        }
    }

    pub fn last_event_time(&self) -> Option<f64> {
        (self.times.len() > 1).then(|| self.times[self.times.len() - 1])
    }

    /// Writes `t,surv,n_risk,n_event`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,surv,n_risk,n_event")?;
        for k in 0..self.times.len() {
            writeln!(out, "{},{},{},{}", self.times[k], self.survival[k], self.n_risk[k], self.n_event[k])?;
        }
        Ok(())
    }
}

pub fn kaplan_meier(times: &[f64], events: &[bool]) -> Result<KmCurve, KmError> {
    if times.len() != events.len() {
        return Err(KmError::LengthMismatch(times.len(), events.len()));
    }
    if times.is_empty() {
        return Err(KmError::Empty);
    }
    if let Some((index, &time)) = times.iter().enumerate().find(|(_, t)| !(t.is_finite() && **t > 0.0)) {
        return Err(KmError::InvalidTime { index, time });
    }
    let mut order: Vec<usize> = (0..times.len()).collect();
    // events before censorings at tied times
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]).then(events[b].cmp(&events[a])));

    let n = times.len();
    let mut curve = KmCurve {
        times: vec![0.0],
        survival: vec![1.0],
        n_risk: vec![n],
        n_event: vec![0],
        censor_ticks: Vec::new(),
    };
    let mut at_risk = n;
    let mut s = 1.0;
    let mut k = 0;
    while k < n {
        let t = times[order[k]];
        let mut d = 0;
        let mut c = 0;
        while k < n && times[order[k]] == t {
            if events[order[k]] {
                d += 1;
            } else {
                c += 1;
                curve.censor_ticks.push(t);
            }
            k += 1;
        }
        if d > 0 {
            s *= 1.0 - d as f64 / at_risk as f64;
            curve.times.push(t);
            curve.survival.push(s);
            curve.n_risk.push(at_risk);
            curve.n_event.push(d);
        }
        at_risk -= d + c;
    }
    Ok(curve)
}

/// Kaplan–Meier of a dataset; cured subjects are censored at `cure_at`,
/// defaulting to the dataset's cure threshold or else its largest finite
/// time.
pub fn kaplan_meier_dataset(ds: &Dataset, cure_at: Option<f64>) -> Result<KmCurve, KmError> {
    let finite_max = ds.subjects().iter().filter(|s| !s.is_cured()).map(|s| s.time).fold(0.0, f64::max);
    let cure_time = cure_at.or(ds.cure_threshold()).unwrap_or(finite_max);
    let times: Vec<f64> = ds.subjects().iter().map(|s| if s.is_cured() { cure_time } else { s.time }).collect();
    let events: Vec<bool> = ds.subjects().iter().map(|s| s.status == Status::Event).collect();
    kaplan_meier(&times, &events)
}
