//! Gaussian primitives: log-density evaluation, affine transformation,
//! precision-weighted products and k-means initialization.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input, numeric, Result};
use crate::linalg::symmetrize;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Relative scale of the ridge added to estimated covariances.
pub const REGULARIZATION_SCALE: f64 = 1e-6;
/// Absolute lower bound on the ridge, used when a covariance has zero trace.
pub const REGULARIZATION_MIN: f64 = 1e-10;

const SYMMETRY_TOL: f64 = 1e-9;
const MIN_ABS_DET: f64 = 1e-12;

/// Multivariate normal distribution with a symmetric positive-definite covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGaussian", into = "RawGaussian")]
pub struct Gaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return input("Gaussian must have dimension >= 1");
        }
        if cov.nrows() != d || cov.ncols() != d {
            return input(format!(
                "covariance is {}x{} but mean has length {d}",
                cov.nrows(),
                cov.ncols()
            ));
        }
        if !mean.iter().chain(cov.iter()).all(|v| v.is_finite()) {
            return numeric("Gaussian parameters must be finite");
        }
        let scale = cov.amax().max(f64::MIN_POSITIVE);
        if (&cov - cov.transpose()).amax() > SYMMETRY_TOL * scale {
            return input("covariance is not symmetric");
        }
        if Cholesky::new(cov.clone()).is_none() {
            return numeric("covariance is not positive definite");
        }
        Ok(Self { mean, cov })
    }

    /// One-dimensional convenience constructor taking a variance.
    pub fn scalar(mean: f64, var: f64) -> Result<Self> {
        Self::new(DVector::from_element(1, mean), DMatrix::from_element(1, 1, var))
    }

    pub(crate) fn from_parts_unchecked(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        Self { mean, cov }
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn precision(&self) -> Result<DMatrix<f64>> {
        spd_inverse(&self.cov)
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        log_density(x, self)
    }

    /// Cached evaluator for repeated density queries.
    pub fn evaluator(&self) -> Result<DensityEvaluator> {
        DensityEvaluator::new(self)
    }
}

#[derive(Serialize, Deserialize)]
struct RawGaussian {
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

impl TryFrom<RawGaussian> for Gaussian {
    type Error = crate::Error;

    fn try_from(raw: RawGaussian) -> Result<Self> {
        let cov = matrix_from_nested(&raw.cov, "cov")?;
        Gaussian::new(DVector::from_vec(raw.mean), cov)
    }
}

impl From<Gaussian> for RawGaussian {
    fn from(g: Gaussian) -> Self {
        RawGaussian {
            mean: g.mean.as_slice().to_vec(),
            cov: nested_from_matrix(&g.cov),
        }
    }
}

pub(crate) fn matrix_from_nested(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return input(format!("{what}: ragged matrix rows"));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub(crate) fn nested_from_matrix(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Precomputed Cholesky factor and normalizer of a Gaussian.
#[derive(Debug, Clone)]
pub struct DensityEvaluator {
    mean: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    log_norm: f64,
}

impl DensityEvaluator {
    pub fn new(g: &Gaussian) -> Result<Self> {
        let chol = match Cholesky::new(g.cov.clone()) {
            Some(c) => c,
            None => return numeric("covariance is not positive definite"),
        };
        let log_det: f64 = chol.l_dirty().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        let log_norm = -0.5 * (g.dim() as f64 * LN_2PI + log_det);
        Ok(Self {
            mean: g.mean.clone(),
            chol,
            log_norm,
        })
    }

    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let diff = x - &self.mean;
        let z = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&diff)
            .expect("Cholesky factor has a positive diagonal");
        self.log_norm - 0.5 * z.norm_squared()
    }
}

/// Natural log of `N(x | g.mean, g.cov)`.
pub fn log_density(x: &DVector<f64>, g: &Gaussian) -> Result<f64> {
    if x.len() != g.dim() {
        return input(format!(
            "point has dimension {} but Gaussian has dimension {}",
            x.len(),
            g.dim()
        ));
    }
    Ok(DensityEvaluator::new(g)?.log_density(x))
}

/// Affine coordinate frame `x_global = A x_local + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawFrame", into = "RawFrame")]
pub struct AffineFrame {
    a: DMatrix<f64>,
    b: DVector<f64>,
}

impl AffineFrame {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        let d = b.len();
        if a.nrows() != d || a.ncols() != d {
            return input(format!(
                "frame matrix is {}x{} but offset has length {d}",
                a.nrows(),
                a.ncols()
            ));
        }
        if !a.iter().chain(b.iter()).all(|v| v.is_finite()) {
            return input("frame entries must be finite");
        }
        if a.determinant().abs() <= MIN_ABS_DET {
            return input("frame matrix is singular");
        }
        Ok(Self { a, b })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            a: DMatrix::identity(dim, dim),
            b: DVector::zeros(dim),
        }
    }

    pub fn translation(b: DVector<f64>) -> Self {
        Self {
            a: DMatrix::identity(b.len(), b.len()),
            b,
        }
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    /// The frame `(A^-1, -A^-1 b)` that undoes this one.
    pub fn inverse(&self) -> Result<Self> {
        let a_inv = match self.a.clone().try_inverse() {
            Some(m) => m,
            None => return input("frame matrix is singular"),
        };
        let b = -(&a_inv * &self.b);
        Self::new(a_inv, b)
    }

    /// Express a global point in this frame: `A^-1 (x - b)`.
    pub fn to_local(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let lu = self.a.clone().lu();
        match lu.solve(&(x - &self.b)) {
            Some(v) => Ok(v),
            None => input("frame matrix is singular"),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RawFrame {
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
}

impl TryFrom<RawFrame> for AffineFrame {
    type Error = crate::Error;

    fn try_from(raw: RawFrame) -> Result<Self> {
        AffineFrame::new(matrix_from_nested(&raw.a, "frame.a")?, DVector::from_vec(raw.b))
    }
}

impl From<AffineFrame> for RawFrame {
    fn from(f: AffineFrame) -> Self {
        RawFrame {
            a: nested_from_matrix(&f.a),
            b: f.b.as_slice().to_vec(),
        }
    }
}

/// Push a Gaussian through an affine frame: `N(A mu + b, A Sigma A^T)`.
pub fn transform(g: &Gaussian, frame: &AffineFrame) -> Result<Gaussian> {
    if frame.dim() != g.dim() {
        return input(format!(
            "frame dimension {} does not match Gaussian dimension {}",
            frame.dim(),
            g.dim()
        ));
    }
    if frame.a.determinant().abs() <= MIN_ABS_DET {
        return input("frame matrix is singular");
    }
    let mean = &frame.a * &g.mean + &frame.b;
    let cov = symmetrize(&(&frame.a * &g.cov * frame.a.transpose()));
    Ok(Gaussian::from_parts_unchecked(mean, cov))
}

/// Normalized product of Gaussian factors. The result precision is the sum
/// of the factor precisions and the mean is the precision-weighted average.
pub fn product_of_gaussians(factors: &[Gaussian]) -> Result<Gaussian> {
    let first = match factors.first() {
        Some(f) => f,
        None => return input("product of Gaussians needs at least one factor"),
    };
    let d = first.dim();
    if factors.len() == 1 {
        return Ok(first.clone());
    }
    let mut precision = DMatrix::zeros(d, d);
    let mut info = DVector::zeros(d);
    for (j, f) in factors.iter().enumerate() {
        if f.dim() != d {
            return input(format!("factor {j} has dimension {} (expected {d})", f.dim()));
        }
        let p = f.precision()?;
        info += &p * &f.mean;
        precision += p;
    }
    let cov = symmetrize(&spd_inverse(&symmetrize(&precision))?);
    let mean = &cov * info;
    Gaussian::new(mean, cov)
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    match Cholesky::new(m.clone()) {
        Some(c) => Ok(symmetrize(&c.inverse())),
        None => numeric("matrix is not positive definite"),
    }
}

/// Ridge added to a covariance estimate: `1e-6 * trace / D`, never below
/// [`REGULARIZATION_MIN`].
pub fn regularization_ridge(cov: &DMatrix<f64>) -> f64 {
    let d = cov.nrows().max(1) as f64;
    (REGULARIZATION_SCALE * cov.trace() / d).max(REGULARIZATION_MIN)
}

/// Symmetrize and add the regularization ridge to a covariance estimate.
pub fn regularize(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let eps = regularization_ridge(cov);
    let mut out = symmetrize(cov);
    for i in 0..out.nrows() {
        out[(i, i)] += eps;
    }
    out
}

/// Weighted mean and (population) covariance of the rows of `data`.
pub(crate) fn weighted_moments(
    data: &[DVector<f64>],
    weights: impl Iterator<Item = f64> + Clone,
) -> (f64, DVector<f64>, DMatrix<f64>) {
    let d = data.first().map_or(0, |x| x.len());
    let mut total = 0.0;
    let mut mean = DVector::zeros(d);
    for (x, w) in data.iter().zip(weights.clone()) {
        total += w;
        mean.axpy(w, x, 1.0);
    }
    if total > 0.0 {
        mean /= total;
    }
    let mut cov = DMatrix::zeros(d, d);
    for (x, w) in data.iter().zip(weights) {
        let diff = x - &mean;
        cov.ger(w, &diff, &diff, 1.0);
    }
    if total > 0.0 {
        cov /= total;
    }
    (total, mean, symmetrize(&cov))
}

/// Result of [`kmeans_init`].
#[derive(Debug, Clone)]
pub struct KMeansInit {
    pub priors: DVector<f64>,
    pub gaussians: Vec<Gaussian>,
    /// Cluster index of every input row.
    pub labels: Vec<usize>,
}

const KMEANS_MAX_ITERS: usize = 100;
/// Independent k-means++ runs; the lowest within-cluster scatter wins.
const KMEANS_RESTARTS: usize = 10;

/// k-means++ seeded Lloyd iterations; returns cluster fractions and the
/// regularized empirical Gaussian of each cluster. Deterministic per seed.
pub fn kmeans_init(data: &DMatrix<f64>, k: usize, seed: u64) -> Result<KMeansInit> {
    let rows = crate::linalg::rows_of(data);
    kmeans_rows(&rows, k, seed)
}

pub(crate) fn kmeans_rows(rows: &[DVector<f64>], k: usize, seed: u64) -> Result<KMeansInit> {
    let labels = kmeans_labels(rows, k, seed)?;
    let n = rows.len();
    let mut priors = DVector::zeros(k);
    let mut gaussians = Vec::with_capacity(k);
    for c in 0..k {
        let (count, g) = cluster_gaussian(rows, &labels, c)?;
        priors[c] = count / n as f64;
        gaussians.push(g);
    }
    Ok(KMeansInit {
        priors,
        gaussians,
        labels,
    })
}

/// Empirical Gaussian of the rows labelled `cluster`.
pub(crate) fn cluster_gaussian(
    rows: &[DVector<f64>],
    labels: &[usize],
    cluster: usize,
) -> Result<(f64, Gaussian)> {
    let weights = labels.iter().map(move |&l| if l == cluster { 1.0 } else { 0.0 });
    let (count, mean, cov) = weighted_moments(rows, weights);
    Ok((count, Gaussian::new(mean, regularize(&cov))?))
}

pub(crate) fn kmeans_labels(rows: &[DVector<f64>], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 {
        return input("k-means needs at least one cluster");
    }
    let n = rows.len();
    if n < k {
        return input(format!("k-means with {k} clusters needs at least {k} points, got {n}"));
    }
    let dim = rows[0].len();
    if rows.iter().any(|r| r.len() != dim) {
        return input("k-means rows have inconsistent dimension");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..KMEANS_RESTARTS {
        let (labels, centers) = kmeans_run(rows, k, &mut rng)?;
        let scatter: f64 = rows.iter().zip(&labels).map(|(x, &l)| (x - &centers[l]).norm_squared()).sum();
        if best.as_ref().is_none_or(|(b, _)| scatter < *b) {
            best = Some((scatter, labels));
        }
    }
    Ok(best.expect("at least one restart").1)
}

fn kmeans_run(rows: &[DVector<f64>], k: usize, rng: &mut ChaCha8Rng) -> Result<(Vec<usize>, Vec<DVector<f64>>)> {
    let n = rows.len();
    let dim = rows[0].len();

    // k-means++ seeding
    let mut centers: Vec<DVector<f64>> = Vec::with_capacity(k);
    centers.push(rows[rng.random_range(0..n)].clone());
    let mut nearest: Vec<f64> = rows.iter().map(|x| (x - &centers[0]).norm_squared()).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, w) in nearest.iter().enumerate() {
                if target < *w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.push(rows[idx].clone());
        for (i, x) in rows.iter().enumerate() {
            nearest[i] = nearest[i].min((x - &centers[centers.len() - 1]).norm_squared());
        }
    }

    let mut labels = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for (i, x) in rows.iter().enumerate() {
            let best = nearest_center(x, &centers);
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        // refill empty clusters from the point farthest from its own center
        for c in 0..k {
            if labels.contains(&c) {
                continue;
            }
            let (far, _) = rows
                .iter()
                .enumerate()
                .filter(|(i, _)| labels.iter().filter(|&&l| l == labels[*i]).count() > 1)
                .map(|(i, x)| (i, (x - &centers[labels[i]]).norm_squared()))
                .fold((usize::MAX, f64::NEG_INFINITY), |acc, cur| {
                    if cur.1 > acc.1 {
                        cur
                    } else {
                        acc
                    }
                });
            if far == usize::MAX {
                return numeric("k-means could not refill an empty cluster");
            }
            labels[far] = c;
            centers[c] = rows[far].clone();
            changed = true;
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let mut sum = DVector::zeros(dim);
            let mut count = 0usize;
            for (x, &l) in rows.iter().zip(&labels) {
                if l == c {
                    sum += x;
                    count += 1;
                }
            }
            *center = sum / count as f64;
        }
        if !changed {
            break;
        }
    }
    Ok((labels, centers))
}

fn nearest_center(x: &DVector<f64>, centers: &[DVector<f64>]) -> usize {
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (c, center) in centers.iter().enumerate() {
        let dist = (x - center).norm_squared();
        if dist < best_dist {
            best = c;
            best_dist = dist;
        }
    }
    best
}
