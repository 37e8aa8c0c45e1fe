//! Synthetic demonstration generators.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{input, Result};
use crate::gaussian::AffineFrame;
use crate::io::{Dataset, Demonstration, META_DT, META_POSITION_DIMS, META_SPLIT};
use crate::task_params::FrameSet;

/// Time step written into generated datasets: one demonstration step is
/// the time unit.
pub const DEFAULT_DT: f64 = 1.0;

/// Corner points of the Z in the plane; the third coordinate is the lateral offset.
const Z_CORNERS: [[f64; 2]; 4] = [[0.0, 1.0], [1.0, 1.0], [0.0, 0.0], [1.0, 0.0]];
const Z_OFFSET_SPACING: f64 = 0.05;

/// Sample indices of the two interior corners for `t_len` samples spread
/// proportionally to segment length.
fn corner_indices(t_len: usize) -> [usize; 2] {
    let lens: Vec<f64> = Z_CORNERS
        .windows(2)
        .map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt())
        .collect();
    let total: f64 = lens.iter().sum();
    let last = (t_len - 1) as f64;
    let i1 = ((last * lens[0] / total).round() as usize).clamp(1, t_len - 3);
    let i2 = ((last * (lens[0] + lens[1]) / total).round() as usize).clamp(i1 + 1, t_len - 2);
    [i1, i2]
}

/// Parallel three-segment Z curves in 3-D with Gaussian noise.
pub fn gen_zshape(n_demos: usize, t_len: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n_demos == 0 {
        return input("at least one demonstration is required");
    }
    if t_len < 4 {
        return input("a Z needs at least 4 samples so both corners are sampled");
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return input("noise must be a non-negative number");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let [i1, i2] = corner_indices(t_len);
    let knots = [0, i1, i2, t_len - 1];
    let centre = (n_demos - 1) as f64 / 2.0;
    let demos = (0..n_demos)
        .map(|m| {
            let offset = (m as f64 - centre) * Z_OFFSET_SPACING;
            let mut points = DMatrix::zeros(t_len, 3);
            for seg in 0..3 {
                let (s, e) = (knots[seg], knots[seg + 1]);
                for t in s..=e {
                    let w = (t - s) as f64 / (e - s) as f64;
                    for d in 0..2 {
                        points[(t, d)] = Z_CORNERS[seg][d] + w * (Z_CORNERS[seg + 1][d] - Z_CORNERS[seg][d]);
                    }
                    points[(t, 2)] = offset;
                }
            }
            if noise > 0.0 {
                for v in points.iter_mut() {
                    *v += noise * normal.sample(&mut rng);
                }
            }
            Demonstration {
                points,
                frames: FrameSet::identity(3),
            }
        })
        .collect();
    Ok(Dataset {
        dim: 3,
        n_frames: 1,
        demos,
        metadata: BTreeMap::from([
            (META_DT.to_string(), DEFAULT_DT.to_string()),
            (META_POSITION_DIMS.to_string(), "3".to_string()),
            (META_SPLIT.to_string(), vec!["train"; n_demos].join(",")),
        ]),
    })
}

fn rotation(theta: f64) -> DMatrix<f64> {
    let (s, c) = theta.sin_cos();
    DMatrix::from_row_slice(2, 2, &[c, -s, s, c])
}

/// Minimum-jerk blend from 0 to 1.
fn min_jerk(s: f64) -> f64 {
    s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
}

pub const PICKPLACE_NOISE: f64 = 0.002;

/// Planar pick-and-place analogue with a start frame (rotated with the
/// object) and a goal frame whose height varies across demonstrations.
/// Even-indexed demos are labelled `train`, odd ones `test`.
pub fn gen_pickplace(n_demos: usize, t_len: usize, seed: u64) -> Result<Dataset> {
    if n_demos < 2 {
        return input("pick-and-place needs at least 2 demonstrations");
    }
    if t_len < 4 {
        return input("at least 4 samples per demonstration are required");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, PICKPLACE_NOISE).expect("valid noise");
    let mut demos = Vec::with_capacity(n_demos);
    for m in 0..n_demos {
        let theta = rng.random_range(-0.5..0.5);
        let start = DVector::from_vec(vec![rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)]);
        let height = 0.2 + 0.4 * m as f64 / (n_demos - 1) as f64;
        let goal = DVector::from_vec(vec![1.0 + rng.random_range(-0.05..0.05), height]);
        let rot = rotation(theta);
        let waypoints = [
            start.clone(),
            &start + &rot * DVector::from_vec(vec![0.2, 0.0]),
            &goal + DVector::from_vec(vec![-0.25, 0.25]),
            goal.clone(),
        ];
        let mut points = DMatrix::zeros(t_len, 2);
        let segs = waypoints.len() - 1;
        for t in 0..t_len {
            let u = t as f64 / (t_len - 1) as f64 * segs as f64;
            let k = (u.floor() as usize).min(segs - 1);
            let s = min_jerk(u - k as f64);
            let p = &waypoints[k] * (1.0 - s) + &waypoints[k + 1] * s;
            points.set_row(t, &p.transpose());
            if t > 0 {
                for d in 0..2 {
                    points[(t, d)] += normal.sample(&mut rng);
                }
            }
        }
        let frames = FrameSet::new(vec![
            AffineFrame::new(rot, start)?,
            AffineFrame::translation(goal),
        ])?;
        demos.push(Demonstration { points, frames });
    }
    let split: Vec<&str> = (0..n_demos).map(|m| if m % 2 == 0 { "train" } else { "test" }).collect();
    Ok(Dataset {
        dim: 2,
        n_frames: 2,
        demos,
        metadata: BTreeMap::from([
            (META_DT.to_string(), DEFAULT_DT.to_string()),
            (META_POSITION_DIMS.to_string(), "2".to_string()),
            (META_SPLIT.to_string(), split.join(",")),
        ]),
    })
}

/// Largest distance between any two observed positions.
pub fn workspace_diameter(ds: &Dataset) -> f64 {
    let pts: Vec<DVector<f64>> = ds.demos.iter().flat_map(|d| crate::linalg::rows_of(&d.points)).collect();
    let mut best: f64 = 0.0;
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            best = best.max((&pts[i] - &pts[j]).norm());
        }
    }
    best
}

/// Number of direction changes along a polyline (angle above `tol` radians).
pub fn count_breakpoints(points: &DMatrix<f64>, tol: f64) -> usize {
    let diffs: Vec<DVector<f64>> = (1..points.nrows())
        .map(|t| (points.row(t) - points.row(t - 1)).transpose())
        .filter(|d| d.norm() > 0.0)
        .collect();
    diffs
        .windows(2)
        .filter(|w| {
            let c = w[0].dot(&w[1]) / (w[0].norm() * w[1].norm());
            c.clamp(-1.0, 1.0).acos() > tol
        })
        .count()
}
