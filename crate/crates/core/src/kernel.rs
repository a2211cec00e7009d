//! Kernel weights, local polynomial design rows and evaluation grids.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum KernelError {
    #[error("bandwidth must be positive and finite, got {0}")]
    Bandwidth(f64),
    #[error("grid needs at least 2 points, got {0}")]
    GridCount(usize),
    #[error("degenerate grid range ({0}, {1})")]
    GridRange(f64, f64),
    #[error("unknown kernel `{0}`")]
    UnknownKernel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Epanechnikov,
}

impl KernelKind {
    /// Unscaled kernel `K(u)` supported on `[-1, 1]`.
    pub fn eval(self, u: f64) -> f64 {
        match self {
            KernelKind::Epanechnikov => {
                if u.abs() <= 1.0 {
                    0.75 * (1.0 - u * u)
                } else {
                    0.0
                }
            }
        }
    }
}

impl std::str::FromStr for KernelKind {
    type Err = KernelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "epanechnikov" => Ok(KernelKind::Epanechnikov),
            other => Err(KernelError::UnknownKernel(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    bandwidth: f64,
}

impl KernelSpec {
    pub fn new(kind: KernelKind, bandwidth: f64) -> Result<Self, KernelError> {
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(KernelError::Bandwidth(bandwidth));
        }
        Ok(Self { kind, bandwidth })
    }

    pub fn epanechnikov(bandwidth: f64) -> Result<Self, KernelError> {
        Self::new(KernelKind::Epanechnikov, bandwidth)
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// `K_h(d) = K(d / h) / h`.
    pub fn weight(&self, d: f64) -> f64 {
        self.kind.eval(d / self.bandwidth) / self.bandwidth
    }
}

/// `(1, d, d², …, d^p)` with `d = xi - x`.
pub fn design_row(x: f64, xi: f64, degree: usize) -> DVector<f64> {
    let d = xi - x;
    let mut row = DVector::zeros(degree + 1);
    let mut v = 1.0;
    for j in 0..=degree {
        row[j] = v;
        v *= d;
    }
    row
}

/// `count` equally spaced points from `min` to `max` inclusive.
pub fn make_grid(range: (f64, f64), count: usize) -> Result<Vec<f64>, KernelError> {
    let (lo, hi) = range;
    if count < 2 {
        return Err(KernelError::GridCount(count));
    }
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(KernelError::GridRange(lo, hi));
    }
    let step = (hi - lo) / (count - 1) as f64;
    let mut grid: Vec<f64> = (0..count).map(|k| lo + step * k as f64).collect();
    grid[count - 1] = hi;
    Ok(grid)
}
