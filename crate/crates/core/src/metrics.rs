//! Trajectory error metrics.

use nalgebra::DMatrix;

use crate::error::{input, Result};

/// Linear-interpolation resampling of the rows of `traj` to `len` rows.
pub fn resample(traj: &DMatrix<f64>, len: usize) -> DMatrix<f64> {
    let n = traj.nrows();
    if n == len || n == 0 {
        return traj.clone();
    }
    if n == 1 || len == 1 {
        return DMatrix::from_fn(len, traj.ncols(), |_, j| traj[(0, j)]);
    }
    DMatrix::from_fn(len, traj.ncols(), |i, j| {
        let u = i as f64 * (n - 1) as f64 / (len - 1) as f64;
        let k = (u.floor() as usize).min(n - 2);
        let w = u - k as f64;
        traj[(k, j)] * (1.0 - w) + traj[(k + 1, j)] * w
    })
}

/// Mean over time of the squared distance restricted to `dims`. The shorter
/// trajectory is resampled to the longer length.
pub fn mse(a: &DMatrix<f64>, b: &DMatrix<f64>, dims: &[usize]) -> Result<f64> {
    if dims.is_empty() {
        return input("mean squared error needs at least one dimension");
    }
    if a.nrows() == 0 || b.nrows() == 0 {
        return input("trajectories must be non-empty");
    }
    if let Some(&d) = dims.iter().find(|&&d| d >= a.ncols() || d >= b.ncols()) {
        return input(format!("dimension {d} is out of range"));
    }
    let len = a.nrows().max(b.nrows());
    let (ra, rb) = (resample(a, len), resample(b, len));
    let total: f64 = (0..len)
        .map(|t| dims.iter().map(|&d| (ra[(t, d)] - rb[(t, d)]).powi(2)).sum::<f64>())
        .sum();
    Ok(total / len as f64)
}

/// Per-demonstration errors with their mean and population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct MseSummary {
    pub per_demo: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl MseSummary {
    pub fn from_values(per_demo: Vec<f64>) -> Result<Self> {
        if per_demo.is_empty() {
            return input("no errors to summarize");
        }
        let n = per_demo.len() as f64;
        let mean = per_demo.iter().sum::<f64>() / n;
        let std = (per_demo.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Ok(Self { per_demo, mean, std })
    }
}
