//! Parsimonious covariance structures used as alternative M-steps.
//!
//! * Mixture of factor analyzers: `Sigma_i = L_i L_i^T + Psi_i` with a
//!   `D x d` loading matrix and a diagonal noise term (optionally isotropic,
//!   which gives MPPCA).
//! * Semi-tied covariances: `Sigma_i = H diag(s_i) H^T` with one basis `H`
//!   per frame shared by every state.
//!
//! Both updates work from weighted sufficient statistics and are ascent
//! steps on the expected complete-data log-likelihood, so they can be run
//! for a few inner iterations inside each outer EM iteration.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{input, numeric, Result};
use crate::gaussian::{regularization_ridge, spd_inverse, weighted_moments};
use crate::linalg::{rows_of, sorted_sym_eigen, symmetrize};

/// Default inner iterations of the factor-analyzer update per EM iteration.
pub const MFA_INNER_ITERS: usize = 5;
/// Default inner iterations of the semi-tied update per EM iteration.
pub const SEMITIED_INNER_ITERS: usize = 10;

/// States whose responsibility mass falls below this keep their parameters.
pub(crate) const DEAD_STATE_WEIGHT: f64 = 1e-8;

/// Covariance structure of the emission Gaussians.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CovarianceStructure {
    Full,
    Mfa { latent_dim: usize, isotropic: bool },
    SemiTied,
}

impl CovarianceStructure {
    pub fn mfa(latent_dim: usize) -> Self {
        CovarianceStructure::Mfa {
            latent_dim,
            isotropic: false,
        }
    }

    pub fn mppca(latent_dim: usize) -> Self {
        CovarianceStructure::Mfa {
            latent_dim,
            isotropic: true,
        }
    }
}

/// Weighted sufficient statistics of one state in one frame.
#[derive(Debug, Clone)]
pub struct WeightedStats {
    pub weight: f64,
    pub mean: DVector<f64>,
    /// Weighted covariance (normalized by `weight`).
    pub scatter: DMatrix<f64>,
}

/// Per-state (and per-frame) statistics from responsibilities `gamma`
/// (`N x K`) and per-frame data matrices (`N x D` each). Indexed `[state][frame]`.
pub fn weighted_stats(gamma: &DMatrix<f64>, data: &[DMatrix<f64>]) -> Result<Vec<Vec<WeightedStats>>> {
    if data.is_empty() {
        return input("at least one frame of data is required");
    }
    let n = gamma.nrows();
    if data.iter().any(|m| m.nrows() != n) {
        return input("responsibilities and data have different numbers of rows");
    }
    let frame_rows: Vec<Vec<DVector<f64>>> = data.iter().map(rows_of).collect();
    Ok((0..gamma.ncols())
        .map(|k| {
            frame_rows
                .iter()
                .map(|rows| {
                    let (weight, mean, scatter) = weighted_moments(rows, gamma.column(k).iter().copied());
                    WeightedStats { weight, mean, scatter }
                })
                .collect()
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Mixture of factor analyzers

/// Loadings and diagonal noise, indexed `[state][frame]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MfaParams {
    pub latent_dim: usize,
    pub isotropic: bool,
    pub loadings: Vec<Vec<DMatrix<f64>>>,
    pub noise: Vec<Vec<DVector<f64>>>,
}

impl MfaParams {
    /// Initialize from full covariances by keeping the top `latent_dim`
    /// principal directions and assigning the residual variance to the noise.
    pub fn from_covariances(covs: &[Vec<DMatrix<f64>>], latent_dim: usize, isotropic: bool) -> Result<Self> {
        let dim = covs
            .first()
            .and_then(|f| f.first())
            .map(|c| c.nrows())
            .ok_or_else(|| crate::Error::Input("no covariances given".into()))?;
        check_latent_dim(latent_dim, dim)?;
        let mut loadings = Vec::with_capacity(covs.len());
        let mut noise = Vec::with_capacity(covs.len());
        for per_frame in covs {
            let mut l_row = Vec::new();
            let mut n_row = Vec::new();
            for cov in per_frame {
                let (l, psi) = factor_init(cov, latent_dim, isotropic);
                l_row.push(l);
                n_row.push(psi);
            }
            loadings.push(l_row);
            noise.push(n_row);
        }
        Ok(Self {
            latent_dim,
            isotropic,
            loadings,
            noise,
        })
    }

    pub fn covariance(&self, state: usize, frame: usize) -> DMatrix<f64> {
        factor_covariance(&self.loadings[state][frame], &self.noise[state][frame])
    }
}

fn check_latent_dim(latent_dim: usize, dim: usize) -> Result<()> {
    if latent_dim == 0 || latent_dim >= dim {
        return input(format!(
            "latent dimension must satisfy 1 <= d < D (got d = {latent_dim}, D = {dim})"
        ));
    }
    Ok(())
}

pub fn factor_covariance(loading: &DMatrix<f64>, noise: &DVector<f64>) -> DMatrix<f64> {
    let mut cov = loading * loading.transpose();
    for i in 0..cov.nrows() {
        cov[(i, i)] += noise[i];
    }
    symmetrize(&cov)
}

/// Isotropic noise: closed-form probabilistic PCA. Diagonal noise: principal
/// factors of the covariance whitened by its own diagonal.
fn factor_init(cov: &DMatrix<f64>, d: usize, isotropic: bool) -> (DMatrix<f64>, DVector<f64>) {
    let dim = cov.nrows();
    let floor = regularization_ridge(cov);
    if isotropic {
        let (values, vectors) = sorted_sym_eigen(cov);
        let residual = (values.rows(d, dim - d).sum() / (dim - d) as f64).max(floor);
        let mut loading = DMatrix::zeros(dim, d);
        for c in 0..d {
            let scale = (values[c] - residual).max(0.0).sqrt();
            loading.set_column(c, &(vectors.column(c) * scale));
        }
        return (loading, DVector::from_element(dim, residual));
    }
    let sd = DVector::from_fn(dim, |i, _| cov[(i, i)].max(floor).sqrt());
    let whitened = DMatrix::from_fn(dim, dim, |i, j| cov[(i, j)] / (sd[i] * sd[j]));
    let (values, vectors) = sorted_sym_eigen(&whitened);
    let mut loading = DMatrix::zeros(dim, d);
    for c in 0..d {
        let scale = (values[c] - 1.0).max(0.0).sqrt();
        for i in 0..dim {
            loading[(i, c)] = sd[i] * vectors[(i, c)] * scale;
        }
    }
    let approx = &loading * loading.transpose();
    let noise = DVector::from_fn(dim, |i, _| (cov[(i, i)] - approx[(i, i)]).max(floor));
    (loading, noise)
}

/// Expected complete-data log-likelihood contribution (up to constants) of
/// weighted data with covariance `scatter` under `N(., L L^T + Psi)`.
pub fn factor_objective(weight: f64, scatter: &DMatrix<f64>, loading: &DMatrix<f64>, noise: &DVector<f64>) -> Result<f64> {
    let cov = factor_covariance(loading, noise);
    gaussian_objective(weight, scatter, &cov)
}

pub(crate) fn gaussian_objective(weight: f64, scatter: &DMatrix<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let chol = match nalgebra::Cholesky::new(cov.clone()) {
        Some(c) => c,
        None => return numeric("covariance is not positive definite"),
    };
    let log_det: f64 = chol.l_dirty().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    let trace = (chol.inverse() * scatter).trace();
    Ok(-0.5 * weight * (log_det + trace))
}

/// Factor-analyzer EM on a fixed weighted scatter, starting from the given
/// loading and noise. Each iteration does not decrease [`factor_objective`]
/// unless the noise floor binds.
pub fn factor_refine(
    scatter: &DMatrix<f64>,
    mut loading: DMatrix<f64>,
    mut noise: DVector<f64>,
    isotropic: bool,
    inner_iters: usize,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let dim = scatter.nrows();
    let d = loading.ncols();
    let floor = regularization_ridge(scatter);
    for _ in 0..inner_iters {
        let sigma_inv = spd_inverse(&factor_covariance(&loading, &noise))?;
        let beta = loading.transpose() * &sigma_inv;
        let ezz = DMatrix::identity(d, d) - &beta * &loading + &beta * scatter * beta.transpose();
        let ezz_inv = spd_inverse(&symmetrize(&ezz))?;
        let new_loading = scatter * beta.transpose() * ezz_inv;
        let residual = scatter - &new_loading * &beta * scatter;
        noise = if isotropic {
            let s2 = (residual.trace() / dim as f64).max(floor);
            DVector::from_element(dim, s2)
        } else {
            DVector::from_fn(dim, |i, _| residual[(i, i)].max(floor))
        };
        loading = new_loading;
    }
    Ok((loading, noise))
}

/// MFA M-step: weighted means plus `inner_iters` factor-analyzer updates of
/// every state/frame starting from `prev`.
pub fn mfa_mstep(
    gamma: &DMatrix<f64>,
    data: &[DMatrix<f64>],
    prev: &MfaParams,
    inner_iters: usize,
) -> Result<(Vec<Vec<DVector<f64>>>, MfaParams)> {
    let dim = data.first().map_or(0, |m| m.ncols());
    check_latent_dim(prev.latent_dim, dim)?;
    let stats = weighted_stats(gamma, data)?;
    mfa_update(&stats, prev, inner_iters)
}

pub(crate) fn mfa_update(
    stats: &[Vec<WeightedStats>],
    prev: &MfaParams,
    inner_iters: usize,
) -> Result<(Vec<Vec<DVector<f64>>>, MfaParams)> {
    if stats.len() != prev.loadings.len() {
        return input("MFA parameters and statistics disagree on the number of states");
    }
    let mut next = prev.clone();
    let mut means = Vec::with_capacity(stats.len());
    for (k, per_frame) in stats.iter().enumerate() {
        let mut row = Vec::with_capacity(per_frame.len());
        for (f, s) in per_frame.iter().enumerate() {
            row.push(s.mean.clone());
            if s.weight < DEAD_STATE_WEIGHT {
                continue;
            }
            let (l, psi) = factor_refine(
                &s.scatter,
                prev.loadings[k][f].clone(),
                prev.noise[k][f].clone(),
                prev.isotropic,
                inner_iters,
            )?;
            next.loadings[k][f] = l;
            next.noise[k][f] = psi;
        }
        means.push(row);
    }
    Ok((means, next))
}

// ---------------------------------------------------------------------------
// Semi-tied covariances

/// One basis per frame shared by all states plus per-state diagonals,
/// `diagonals[state][frame]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SemiTiedParams {
    pub bases: Vec<DMatrix<f64>>,
    pub diagonals: Vec<Vec<DVector<f64>>>,
}

impl SemiTiedParams {
    /// Identity bases with each state's diagonal taken from its covariance.
    pub fn from_covariances(covs: &[Vec<DMatrix<f64>>]) -> Result<Self> {
        let frames = covs.first().map_or(0, Vec::len);
        if frames == 0 {
            return input("no covariances given");
        }
        let dim = covs[0][0].nrows();
        Ok(Self {
            bases: vec![DMatrix::identity(dim, dim); frames],
            diagonals: covs
                .iter()
                .map(|per_frame| per_frame.iter().map(|c| c.diagonal()).collect())
                .collect(),
        })
    }

    pub fn covariance(&self, state: usize, frame: usize) -> DMatrix<f64> {
        let h = &self.bases[frame];
        symmetrize(&(h * DMatrix::from_diagonal(&self.diagonals[state][frame]) * h.transpose()))
    }
}

/// Expected complete-data log-likelihood (up to constants) of the per-state
/// statistics of one frame under `H diag(s_i) H^T`.
pub fn semitied_objective(stats: &[&WeightedStats], basis: &DMatrix<f64>, diagonals: &[DVector<f64>]) -> Result<f64> {
    let transform = match basis.clone().try_inverse() {
        Some(a) => a,
        None => return numeric("semi-tied basis is singular"),
    };
    let log_det_a = transform.determinant().abs().ln();
    let mut total = 0.0;
    for (s, diag) in stats.iter().zip(diagonals) {
        if s.weight < DEAD_STATE_WEIGHT {
            continue;
        }
        let projected = &transform * &s.scatter * transform.transpose();
        let mut term = -2.0 * log_det_a;
        for r in 0..diag.len() {
            term += diag[r].ln() + projected[(r, r)] / diag[r];
        }
        total += -0.5 * s.weight * term;
    }
    Ok(total)
}

fn projected_diagonals(transform: &DMatrix<f64>, stats: &[&WeightedStats], prev: &[DVector<f64>]) -> Vec<DVector<f64>> {
    stats
        .iter()
        .zip(prev)
        .map(|(s, old)| {
            if s.weight < DEAD_STATE_WEIGHT {
                return old.clone();
            }
            let projected = transform * &s.scatter * transform.transpose();
            let floor = regularization_ridge(&projected);
            DVector::from_fn(projected.nrows(), |r, _| projected[(r, r)].max(floor))
        })
        .collect()
}

/// Alternating semi-tied update for one frame: closed-form diagonals given
/// the basis, then row-wise maximum-likelihood updates of the inverse basis
/// given the diagonals.
pub fn semitied_refine(
    stats: &[&WeightedStats],
    basis: &DMatrix<f64>,
    diagonals: &[DVector<f64>],
    inner_iters: usize,
) -> Result<(DMatrix<f64>, Vec<DVector<f64>>)> {
    let dim = basis.nrows();
    let mut transform = match basis.clone().try_inverse() {
        Some(a) => a,
        None => return numeric("semi-tied basis is singular"),
    };
    let live: f64 = stats.iter().filter(|s| s.weight >= DEAD_STATE_WEIGHT).map(|s| s.weight).sum();
    if live <= 0.0 {
        return Ok((basis.clone(), diagonals.to_vec()));
    }
    let mut diag = projected_diagonals(&transform, stats, diagonals);
    for _ in 0..inner_iters {
        for r in 0..dim {
            let mut g = DMatrix::zeros(dim, dim);
            for (s, dg) in stats.iter().zip(&diag) {
                if s.weight >= DEAD_STATE_WEIGHT {
                    g += &s.scatter * (s.weight / dg[r]);
                }
            }
            let g_inv = match spd_inverse(&symmetrize(&g)) {
                Ok(m) => m,
                Err(_) => {
                    let mut ridge = symmetrize(&g);
                    let eps = regularization_ridge(&ridge);
                    for i in 0..dim {
                        ridge[(i, i)] += eps;
                    }
                    spd_inverse(&ridge).map_err(|_| {
                        crate::Error::Numeric("semi-tied accumulated statistics are singular".into())
                    })?
                }
            };
            // cofactor row r of A is proportional to column r of A^-1
            let h = match transform.clone().try_inverse() {
                Some(m) => m,
                None => return numeric("semi-tied transform became singular"),
            };
            let cof = h.column(r).transpose();
            let gc = &g_inv * cof.transpose();
            let quad = (&cof * &gc)[(0, 0)];
            if !(quad > 0.0) {
                return numeric("semi-tied row update is degenerate");
            }
            let row = gc.transpose() * (live / quad).sqrt();
            transform.set_row(r, &row);
        }
        diag = projected_diagonals(&transform, stats, &diag);
    }
    let new_basis = match transform.try_inverse() {
        Some(h) => h,
        None => return numeric("semi-tied transform became singular"),
    };
    Ok((new_basis, diag))
}

/// Semi-tied M-step: weighted means and `inner_iters` alternating updates
/// per frame starting from `prev`.
pub fn semitied_mstep(
    gamma: &DMatrix<f64>,
    data: &[DMatrix<f64>],
    prev: &SemiTiedParams,
    inner_iters: usize,
) -> Result<(Vec<Vec<DVector<f64>>>, SemiTiedParams)> {
    let stats = weighted_stats(gamma, data)?;
    semitied_update(&stats, prev, inner_iters)
}

pub(crate) fn semitied_update(
    stats: &[Vec<WeightedStats>],
    prev: &SemiTiedParams,
    inner_iters: usize,
) -> Result<(Vec<Vec<DVector<f64>>>, SemiTiedParams)> {
    if stats.len() != prev.diagonals.len() {
        return input("semi-tied parameters and statistics disagree on the number of states");
    }
    let mut next = prev.clone();
    for f in 0..prev.bases.len() {
        let frame_stats: Vec<&WeightedStats> = stats.iter().map(|s| &s[f]).collect();
        let frame_diags: Vec<DVector<f64>> = prev.diagonals.iter().map(|d| d[f].clone()).collect();
        let (basis, diags) = semitied_refine(&frame_stats, &prev.bases[f], &frame_diags, inner_iters)?;
        next.bases[f] = basis;
        for (k, d) in diags.into_iter().enumerate() {
            next.diagonals[k][f] = d;
        }
    }
    let means = stats
        .iter()
        .map(|per_frame| per_frame.iter().map(|s| s.mean.clone()).collect())
        .collect();
    Ok((means, next))
}

/// Structure-specific parameters carried alongside the emission Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub enum LatentParams {
    Mfa(MfaParams),
    SemiTied(SemiTiedParams),
}

// ---------------------------------------------------------------------------
// Parameter counting

/// Structure description for [`count_parameters`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParameterLayout {
    Full,
    SemiTied,
    Mfa(usize),
    /// Factor model with a separate latent dimension per state.
    MfaPerState(Vec<usize>),
}

impl From<CovarianceStructure> for ParameterLayout {
    fn from(s: CovarianceStructure) -> Self {
        match s {
            CovarianceStructure::Full => ParameterLayout::Full,
            CovarianceStructure::SemiTied => ParameterLayout::SemiTied,
            CovarianceStructure::Mfa { latent_dim, .. } => ParameterLayout::Mfa(latent_dim),
        }
    }
}

/// Number of free parameters of a task-parameterized HSMM with `states`
/// states, `frames` frames and observation dimension `dim`. Transitions
/// count `K^2`, priors `K`, and each duration model 2.
pub fn count_parameters(layout: &ParameterLayout, states: usize, frames: usize, dim: usize) -> usize {
    let (k, f, d) = (states, frames, dim);
    let markov = k * k + k;
    match layout {
        ParameterLayout::Full => k * (f * (d + d * (d + 1) / 2) + 2) + markov,
        ParameterLayout::SemiTied => f * d * d + k * (2 * f * d + 2) + markov,
        ParameterLayout::Mfa(latent) => k * (f * (2 * d + d * latent) + 2) + markov,
        ParameterLayout::MfaPerState(latents) => {
            latents.iter().map(|l| f * (2 * d + d * l) + 2).sum::<usize>() + markov
        }
    }
}
