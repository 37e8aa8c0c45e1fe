//! Hidden (semi-)Markov model learning and decoding.
//!
//! Emissions are learned with Baum-Welch EM in log space. When a model has
//! several frames, a state's emission likelihood is the product of its
//! per-frame Gaussians evaluated on the per-frame projections of a datapoint.
//! Duration models are estimated after training from Viterbi run lengths and
//! are then used by the duration-aware forward recursion that produces the
//! step-wise reference trajectory.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{input, numeric, Error, Result};
use crate::gaussian::{cluster_gaussian, kmeans_labels, regularize, weighted_moments, DensityEvaluator, Gaussian};
use crate::latent::{
    mfa_update, semitied_update, CovarianceStructure, LatentParams, MfaParams, SemiTiedParams, WeightedStats,
    DEAD_STATE_WEIGHT, MFA_INNER_ITERS, SEMITIED_INNER_ITERS,
};
use crate::linalg::{log_sum_exp, rows_of};

/// Additive smoothing applied to transition counts before normalization.
pub const TRANSITION_SMOOTHING: f64 = 1e-6;
/// Lower bound on the variance of an estimated duration model (squared steps).
pub const DURATION_VAR_FLOOR: f64 = 1.0;
/// A state whose probability of leaving is at most this is treated as
/// absorbing when self-transitions are replaced by the duration model.
pub const ABSORBING_THRESHOLD: f64 = 1e-4;

const ROW_SUM_TOL: f64 = 1e-9;
const MIN_DURATION_VAR: f64 = 1e-9;

/// Gaussian over the number of consecutive steps spent in a state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DurationModel {
    pub mean: f64,
    pub var: f64,
}

impl DurationModel {
    pub fn log_density(&self, steps: usize) -> f64 {
        let var = self.var.max(MIN_DURATION_VAR);
        let diff = steps as f64 - self.mean;
        -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + diff * diff / var)
    }
}

/// Hidden semi-Markov model with per-state, per-frame Gaussian emissions.
#[derive(Debug, Clone, PartialEq)]
pub struct HsmmModel {
    pub priors: DVector<f64>,
    /// Row-stochastic `K x K` transition matrix (HMM form, self-transitions included).
    pub transitions: DMatrix<f64>,
    /// Emission Gaussians indexed `[state][frame]`.
    pub emissions: Vec<Vec<Gaussian>>,
    pub durations: Vec<DurationModel>,
    /// Longest duration considered by the duration-aware forward recursion.
    pub s_max: usize,
    pub structure: CovarianceStructure,
    pub latent: Option<LatentParams>,
}

impl HsmmModel {
    pub fn n_states(&self) -> usize {
        self.priors.len()
    }

    pub fn n_frames(&self) -> usize {
        self.emissions.first().map_or(0, Vec::len)
    }

    pub fn dim(&self) -> usize {
        self.emissions.first().and_then(|f| f.first()).map_or(0, Gaussian::dim)
    }

    /// Emission of `state` in the first (or only) frame.
    pub fn emission(&self, state: usize) -> &Gaussian {
        &self.emissions[state][0]
    }

    /// Check the structural invariants of the model.
    pub fn validate(&self) -> Result<()> {
        let k = self.n_states();
        if k == 0 {
            return input("model has no states");
        }
        if self.transitions.shape() != (k, k) {
            return input(format!("transition matrix must be {k}x{k}"));
        }
        if self.emissions.len() != k || self.durations.len() != k {
            return input("emissions and durations must have one entry per state");
        }
        let f = self.n_frames();
        let d = self.dim();
        if f == 0 || self.emissions.iter().any(|row| row.len() != f || row.iter().any(|g| g.dim() != d)) {
            return input("emission grid must be complete with a common dimension");
        }
        check_distribution(self.priors.iter(), "priors")?;
        for i in 0..k {
            check_distribution(self.transitions.row(i).iter(), &format!("transition row {i}"))?;
        }
        for (i, dur) in self.durations.iter().enumerate() {
            if !(dur.mean >= 1.0) || !(dur.var >= 0.0) || !dur.mean.is_finite() || !dur.var.is_finite() {
                return input(format!("duration model of state {i} is invalid: {dur:?}"));
            }
        }
        if self.s_max == 0 {
            return input("s_max must be at least 1");
        }
        match (&self.structure, &self.latent) {
            (CovarianceStructure::Full, None) => {}
            (CovarianceStructure::Mfa { latent_dim, .. }, Some(LatentParams::Mfa(p))) if p.latent_dim == *latent_dim => {}
            (CovarianceStructure::SemiTied, Some(LatentParams::SemiTied(p))) if p.bases.len() == f => {}
            _ => return input("structure tag does not match the latent parameters"),
        }
        Ok(())
    }

    /// Transition matrix used between segments: self-transitions are replaced
    /// by the duration model, so the diagonal is removed and each row is
    /// renormalized. A state that (almost) never leaves stays absorbing.
    pub fn segment_transitions(&self) -> DMatrix<f64> {
        segment_transitions(&self.transitions)
    }
}

fn check_distribution<'a>(values: impl Iterator<Item = &'a f64>, what: &str) -> Result<()> {
    let mut sum = 0.0;
    for v in values {
        if !(*v >= 0.0) || !v.is_finite() {
            return input(format!("{what} contains an invalid probability {v}"));
        }
        sum += v;
    }
    if (sum - 1.0).abs() > ROW_SUM_TOL {
        return input(format!("{what} sums to {sum}, not 1"));
    }
    Ok(())
}

pub fn segment_transitions(trans: &DMatrix<f64>) -> DMatrix<f64> {
    let k = trans.nrows();
    let mut out = DMatrix::zeros(k, k);
    for i in 0..k {
        let off: f64 = (0..k).filter(|&j| j != i).map(|j| trans[(i, j)]).sum();
        if off <= ABSORBING_THRESHOLD {
            out[(i, i)] = 1.0;
        } else {
            for j in (0..k).filter(|&j| j != i) {
                out[(i, j)] = trans[(i, j)] / off;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Emissions and forward-backward

/// Per-frame observations of one sequence: `frames[f]` holds the rows
/// (time steps) seen from frame `f`.
pub(crate) type FrameRows = Vec<Vec<DVector<f64>>>;

fn evaluators(model: &HsmmModel) -> Result<Vec<Vec<DensityEvaluator>>> {
    model
        .emissions
        .iter()
        .map(|row| row.iter().map(DensityEvaluator::new).collect())
        .collect()
}

fn log_emissions_rows(model: &HsmmModel, obs: &FrameRows) -> Result<DMatrix<f64>> {
    if obs.len() != model.n_frames() {
        return input(format!(
            "model has {} frames but {} observation frames were given",
            model.n_frames(),
            obs.len()
        ));
    }
    let t_len = obs[0].len();
    let d = model.dim();
    for rows in obs {
        if rows.len() != t_len {
            return input("per-frame observations have different lengths");
        }
        if rows.iter().any(|r| r.len() != d) {
            return input(format!("observations must have dimension {d}"));
        }
    }
    let evals = evaluators(model)?;
    let k = model.n_states();
    let mut out = DMatrix::zeros(t_len, k);
    for t in 0..t_len {
        for (i, per_frame) in evals.iter().enumerate() {
            out[(t, i)] = per_frame.iter().zip(obs).map(|(e, rows)| e.log_density(&rows[t])).sum();
        }
    }
    Ok(out)
}

/// Log emission likelihood of every step (rows) under every state (columns).
/// `obs` holds one `T x D` matrix per model frame.
pub fn log_emissions(model: &HsmmModel, obs: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let rows: FrameRows = obs.iter().map(rows_of).collect();
    log_emissions_rows(model, &rows)
}

/// Posterior quantities of one sequence. `log_alpha`/`log_beta` are the
/// unscaled forward/backward variables in log space.
#[derive(Debug, Clone)]
pub struct PosteriorStats {
    pub log_alpha: DMatrix<f64>,
    pub log_beta: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    /// `zeta[t][(i, j)] = P(z_t = i, z_{t+1} = j | all observations)`.
    pub zeta: Vec<DMatrix<f64>>,
    pub log_likelihood: f64,
}

fn ln_matrix(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(f64::ln)
}

/// Forward-backward recursions on precomputed log emissions.
pub fn forward_backward_log(
    priors: &DVector<f64>,
    transitions: &DMatrix<f64>,
    log_emis: &DMatrix<f64>,
) -> Result<PosteriorStats> {
    let (t_len, k) = log_emis.shape();
    if t_len == 0 {
        return input("sequence is empty");
    }
    let log_pi = priors.map(f64::ln);
    let log_a = ln_matrix(transitions);
    let mut la = DMatrix::from_element(t_len, k, f64::NEG_INFINITY);
    let mut buf = vec![0.0; k];
    for i in 0..k {
        la[(0, i)] = log_pi[i] + log_emis[(0, i)];
    }
    check_step(&la, 0)?;
    for t in 1..t_len {
        for i in 0..k {
            for j in 0..k {
                buf[j] = la[(t - 1, j)] + log_a[(j, i)];
            }
            la[(t, i)] = log_sum_exp(&buf) + log_emis[(t, i)];
        }
        check_step(&la, t)?;
    }
    let mut lb = DMatrix::zeros(t_len, k);
    for t in (0..t_len - 1).rev() {
        for i in 0..k {
            for j in 0..k {
                buf[j] = log_a[(i, j)] + log_emis[(t + 1, j)] + lb[(t + 1, j)];
            }
            lb[(t, i)] = log_sum_exp(&buf);
        }
    }
    let last: Vec<f64> = la.row(t_len - 1).iter().copied().collect();
    let log_likelihood = log_sum_exp(&last);

    let mut gamma = DMatrix::zeros(t_len, k);
    for t in 0..t_len {
        let row: Vec<f64> = (0..k).map(|i| la[(t, i)] + lb[(t, i)]).collect();
        let norm = log_sum_exp(&row);
        for i in 0..k {
            gamma[(t, i)] = (row[i] - norm).exp();
        }
    }
    let mut zeta = Vec::with_capacity(t_len.saturating_sub(1));
    for t in 0..t_len.saturating_sub(1) {
        let mut slice = DMatrix::zeros(k, k);
        let mut logs = Vec::with_capacity(k * k);
        for i in 0..k {
            for j in 0..k {
                logs.push(la[(t, i)] + log_a[(i, j)] + log_emis[(t + 1, j)] + lb[(t + 1, j)]);
            }
        }
        let norm = log_sum_exp(&logs);
        for i in 0..k {
            for j in 0..k {
                slice[(i, j)] = (logs[i * k + j] - norm).exp();
            }
        }
        zeta.push(slice);
    }
    Ok(PosteriorStats {
        log_alpha: la,
        log_beta: lb,
        gamma,
        zeta,
        log_likelihood,
    })
}

fn check_step(la: &DMatrix<f64>, t: usize) -> Result<()> {
    let row: Vec<f64> = la.row(t).iter().copied().collect();
    let total = log_sum_exp(&row);
    if total == f64::NEG_INFINITY || total.is_nan() {
        let state = row.iter().position(|v| v.is_nan()).unwrap_or(0);
        return numeric(format!(
            "observation at time {t} has zero probability under every state (first offending state {state})"
        ));
    }
    Ok(())
}

/// Forward-backward for one sequence given one `T x D` matrix per model frame.
pub fn forward_backward(model: &HsmmModel, obs: &[DMatrix<f64>]) -> Result<PosteriorStats> {
    let le = log_emissions(model, obs)?;
    forward_backward_log(&model.priors, &model.transitions, &le)
}

/// Normalized forward variable at the last observed step.
pub fn filter_state(model: &HsmmModel, obs_history: &DMatrix<f64>) -> Result<DVector<f64>> {
    if obs_history.nrows() == 0 {
        return input("filtering needs at least one observation");
    }
    let stats = forward_backward(model, std::slice::from_ref(obs_history))?;
    let t = obs_history.nrows() - 1;
    let row: Vec<f64> = stats.log_alpha.row(t).iter().copied().collect();
    let norm = log_sum_exp(&row);
    Ok(DVector::from_iterator(row.len(), row.iter().map(|v| (v - norm).exp())))
}

// ---------------------------------------------------------------------------
// EM

/// Options for [`em_fit`] and task-parameterized fitting.
#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Stop once successive total log-likelihoods differ by less than this.
    pub tolerance: f64,
    pub seed: u64,
    pub structure: CovarianceStructure,
    /// Inner iterations of the structured M-step; `None` picks the structure default.
    pub inner_iters: Option<usize>,
    /// Allowed transitions (`mask[i][j]`); `None` allows every transition.
    pub transition_mask: Option<Vec<Vec<bool>>>,
    /// Maximum duration; `None` uses the longest demonstration.
    pub s_max: Option<usize>,
    /// Pseudo-count added to every allowed transition in the M-step.
    pub transition_smoothing: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tolerance: 1e-4,
            seed: 0,
            structure: CovarianceStructure::Full,
            inner_iters: None,
            transition_mask: None,
            s_max: None,
            transition_smoothing: TRANSITION_SMOOTHING,
        }
    }
}

/// Mask allowing only self-transitions and moves to the next state.
pub fn left_right_mask(states: usize) -> Vec<Vec<bool>> {
    (0..states)
        .map(|i| (0..states).map(|j| j == i || j == i + 1).collect())
        .collect()
}

/// A trained model with its training trace.
#[derive(Debug, Clone)]
pub struct Fit {
    pub model: HsmmModel,
    /// Total log-likelihood over all demonstrations at each E-step.
    pub log_likelihoods: Vec<f64>,
    pub converged: bool,
}

/// Baum-Welch EM on raw demonstrations (`T_m x D` each), followed by
/// duration estimation.
pub fn em_fit(demos: &[DMatrix<f64>], states: usize, config: &EmConfig) -> Result<Fit> {
    let seqs: Vec<FrameRows> = demos.iter().map(|d| vec![rows_of(d)]).collect();
    fit_sequences(&seqs, states, config)
}

pub(crate) fn fit_sequences(seqs: &[FrameRows], states: usize, config: &EmConfig) -> Result<Fit> {
    if seqs.is_empty() {
        return input("dataset has no demonstrations");
    }
    if states == 0 {
        return input("number of states must be at least 1");
    }
    if !(config.transition_smoothing >= 0.0 && config.transition_smoothing.is_finite()) {
        return input("transition smoothing must be finite and non-negative");
    }
    let frames = seqs[0].len();
    if frames == 0 || seqs.iter().any(|s| s.len() != frames) {
        return input("all demonstrations must provide the same number of frames");
    }
    let dim = seqs[0][0].first().map_or(0, |r| r.len());
    if dim == 0 {
        return input("demonstrations must be non-empty with dimension >= 1");
    }
    for (m, s) in seqs.iter().enumerate() {
        let len = s[0].len();
        if len == 0 {
            return input(format!("demonstration {m} is empty"));
        }
        if s.iter().any(|rows| rows.len() != len || rows.iter().any(|r| r.len() != dim)) {
            return input(format!("demonstration {m} has inconsistent shape"));
        }
    }
    let total: usize = seqs.iter().map(|s| s[0].len()).sum();
    if states > total {
        return input(format!("{states} states requested but only {total} datapoints available"));
    }
    if let Some(mask) = &config.transition_mask {
        if mask.len() != states || mask.iter().any(|r| r.len() != states) {
            return input("transition mask must be K x K");
        }
        if mask.iter().any(|r| !r.iter().any(|&b| b)) {
            return input("every transition mask row must allow at least one transition");
        }
    }

    let mut model = initial_model(seqs, states, config)?;
    let mut trace = Vec::new();
    let mut converged = false;
    for iter in 0..config.max_iters.max(1) {
        let posts: Vec<PosteriorStats> = seqs
            .par_iter()
            .map(|s| {
                let le = log_emissions_rows(&model, s)?;
                forward_backward_log(&model.priors, &model.transitions, &le)
            })
            .collect::<Result<_>>()?;
        let ll: f64 = posts.iter().map(|p| p.log_likelihood).sum();
        if !ll.is_finite() {
            return numeric(format!("log-likelihood became non-finite at iteration {iter}"));
        }
        trace.push(ll);
        if iter > 0 && (ll - trace[iter - 1]).abs() < config.tolerance {
            converged = true;
            break;
        }
        if iter + 1 == config.max_iters.max(1) {
            break;
        }
        model = m_step(&model, seqs, &posts, config)?;
    }
    let s_max = config
        .s_max
        .unwrap_or_else(|| seqs.iter().map(|s| s[0].len()).max().unwrap_or(1));
    model.s_max = s_max.max(1);
    let model = estimate_durations_rows(&model, seqs)?;
    Ok(Fit {
        model,
        log_likelihoods: trace,
        converged,
    })
}

fn allowed(config: &EmConfig, i: usize, j: usize) -> bool {
    config.transition_mask.as_ref().is_none_or(|m| m[i][j])
}

fn initial_model(seqs: &[FrameRows], states: usize, config: &EmConfig) -> Result<HsmmModel> {
    let frames = seqs[0].len();
    // cluster the frame-stacked observations
    let stacked: Vec<DVector<f64>> = seqs
        .iter()
        .flat_map(|s| {
            (0..s[0].len()).map(move |t| {
                if frames == 1 {
                    s[0][t].clone()
                } else {
                    let parts: Vec<f64> = s.iter().flat_map(|rows| rows[t].iter().copied()).collect();
                    DVector::from_vec(parts)
                }
            })
        })
        .collect();
    let labels = kmeans_labels(&stacked, states, config.seed)?;
    let per_frame: Vec<Vec<DVector<f64>>> = (0..frames)
        .map(|f| seqs.iter().flat_map(|s| s[f].iter().cloned()).collect())
        .collect();
    let n = stacked.len() as f64;
    let mut priors = DVector::zeros(states);
    let mut emissions = Vec::with_capacity(states);
    for c in 0..states {
        let mut row = Vec::with_capacity(frames);
        for rows in &per_frame {
            let (count, g) = cluster_gaussian(rows, &labels, c)?;
            priors[c] = count / n;
            row.push(g);
        }
        emissions.push(row);
    }
    let mut transitions = DMatrix::zeros(states, states);
    for i in 0..states {
        let allowed_count = (0..states).filter(|&j| allowed(config, i, j)).count() as f64;
        for j in 0..states {
            if allowed(config, i, j) {
                transitions[(i, j)] = 1.0 / allowed_count;
            }
        }
    }
    let mut model = HsmmModel {
        priors,
        transitions,
        emissions,
        durations: vec![DurationModel { mean: 1.0, var: DURATION_VAR_FLOOR }; states],
        s_max: 1,
        structure: CovarianceStructure::Full,
        latent: None,
    };
    apply_structure(&mut model, config.structure)?;
    Ok(model)
}

/// Convert full emission covariances to the requested structure.
fn apply_structure(model: &mut HsmmModel, structure: CovarianceStructure) -> Result<()> {
    let covs: Vec<Vec<DMatrix<f64>>> = model
        .emissions
        .iter()
        .map(|row| row.iter().map(|g| g.cov().clone()).collect())
        .collect();
    let latent = match structure {
        CovarianceStructure::Full => None,
        CovarianceStructure::Mfa { latent_dim, isotropic } => {
            Some(LatentParams::Mfa(MfaParams::from_covariances(&covs, latent_dim, isotropic)?))
        }
        CovarianceStructure::SemiTied => Some(LatentParams::SemiTied(SemiTiedParams::from_covariances(&covs)?)),
    };
    model.structure = structure;
    model.latent = latent;
    rebuild_structured_emissions(model)
}

fn rebuild_structured_emissions(model: &mut HsmmModel) -> Result<()> {
    let Some(latent) = &model.latent else {
        return Ok(());
    };
    for (k, row) in model.emissions.iter_mut().enumerate() {
        for (f, g) in row.iter_mut().enumerate() {
            let cov = match latent {
                LatentParams::Mfa(p) => p.covariance(k, f),
                LatentParams::SemiTied(p) => p.covariance(k, f),
            };
            *g = Gaussian::new(g.mean().clone(), cov)?;
        }
    }
    Ok(())
}

fn m_step(model: &HsmmModel, seqs: &[FrameRows], posts: &[PosteriorStats], config: &EmConfig) -> Result<HsmmModel> {
    let k = model.n_states();
    let frames = model.n_frames();
    let m = seqs.len() as f64;

    let mut priors = DVector::zeros(k);
    for p in posts {
        priors += p.gamma.row(0).transpose();
    }
    priors /= m;
    let psum = priors.sum();
    priors /= psum;

    let mut counts = DMatrix::zeros(k, k);
    for p in posts {
        for z in &p.zeta {
            counts += z;
        }
    }
    let mut transitions = DMatrix::zeros(k, k);
    for i in 0..k {
        let row_total: f64 = (0..k)
            .filter(|&j| allowed(config, i, j))
            .map(|j| counts[(i, j)] + config.transition_smoothing)
            .sum();
        if row_total <= 0.0 {
            transitions.set_row(i, &model.transitions.row(i));
            continue;
        }
        for j in 0..k {
            if allowed(config, i, j) {
                transitions[(i, j)] = (counts[(i, j)] + config.transition_smoothing) / row_total;
            }
        }
    }

    // per-state, per-frame weighted statistics over all demonstrations
    let frame_rows: Vec<Vec<DVector<f64>>> = (0..frames)
        .map(|f| seqs.iter().flat_map(|s| s[f].iter().cloned()).collect())
        .collect();
    let stats: Vec<Vec<WeightedStats>> = (0..k)
        .map(|i| {
            let weights: Vec<f64> = posts.iter().flat_map(|p| p.gamma.column(i).iter().copied().collect::<Vec<_>>()).collect();
            frame_rows
                .iter()
                .map(|rows| {
                    let (weight, mean, scatter) = weighted_moments(rows, weights.iter().copied());
                    WeightedStats { weight, mean, scatter }
                })
                .collect()
        })
        .collect();

    let mut next = HsmmModel {
        priors,
        transitions,
        emissions: model.emissions.clone(),
        durations: model.durations.clone(),
        s_max: model.s_max,
        structure: model.structure,
        latent: model.latent.clone(),
    };
    match (&model.structure, &model.latent) {
        (CovarianceStructure::Full, _) => {
            for (i, per_frame) in stats.iter().enumerate() {
                for (f, s) in per_frame.iter().enumerate() {
                    if s.weight < DEAD_STATE_WEIGHT {
                        continue;
                    }
                    next.emissions[i][f] = Gaussian::new(s.mean.clone(), regularize(&s.scatter))?;
                }
            }
        }
        (CovarianceStructure::Mfa { .. }, Some(LatentParams::Mfa(p))) => {
            let iters = config.inner_iters.unwrap_or(MFA_INNER_ITERS);
            let (means, params) = mfa_update(&stats, p, iters)?;
            next.latent = Some(LatentParams::Mfa(params));
            set_means(&mut next, &stats, means)?;
        }
        (CovarianceStructure::SemiTied, Some(LatentParams::SemiTied(p))) => {
            let iters = config.inner_iters.unwrap_or(SEMITIED_INNER_ITERS);
            let (means, params) = semitied_update(&stats, p, iters)?;
            next.latent = Some(LatentParams::SemiTied(params));
            set_means(&mut next, &stats, means)?;
        }
        _ => return Err(Error::Input("structure tag does not match the latent parameters".into())),
    }
    Ok(next)
}

fn set_means(model: &mut HsmmModel, stats: &[Vec<WeightedStats>], means: Vec<Vec<DVector<f64>>>) -> Result<()> {
    for (i, row) in means.into_iter().enumerate() {
        for (f, mu) in row.into_iter().enumerate() {
            if stats[i][f].weight >= DEAD_STATE_WEIGHT {
                let cov = model.emissions[i][f].cov().clone();
                model.emissions[i][f] = Gaussian::new(mu, cov)?;
            }
        }
    }
    rebuild_structured_emissions(model)
}

// ---------------------------------------------------------------------------
// Viterbi and durations

/// Most likely state sequence (max-product), ties to the lowest state index.
pub fn viterbi_log(priors: &DVector<f64>, transitions: &DMatrix<f64>, log_emis: &DMatrix<f64>) -> Vec<usize> {
    let (t_len, k) = log_emis.shape();
    if t_len == 0 {
        return Vec::new();
    }
    let log_a = ln_matrix(transitions);
    let mut delta = DMatrix::from_element(t_len, k, f64::NEG_INFINITY);
    let mut back = vec![vec![0usize; k]; t_len];
    for i in 0..k {
        delta[(0, i)] = priors[i].ln() + log_emis[(0, i)];
    }
    for t in 1..t_len {
        for i in 0..k {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for j in 0..k {
                let v = delta[(t - 1, j)] + log_a[(j, i)];
                if v > best {
                    best = v;
                    arg = j;
                }
            }
            delta[(t, i)] = best + log_emis[(t, i)];
            back[t][i] = arg;
        }
    }
    let mut path = vec![0; t_len];
    path[t_len - 1] = argmax(delta.row(t_len - 1).iter().copied());
    for t in (1..t_len).rev() {
        path[t - 1] = back[t][path[t]];
    }
    path
}

/// Most likely state sequence of one demonstration (one matrix per frame).
pub fn viterbi(model: &HsmmModel, obs: &[DMatrix<f64>]) -> Result<Vec<usize>> {
    let le = log_emissions(model, obs)?;
    Ok(viterbi_log(&model.priors, &model.transitions, &le))
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0;
    for (i, v) in values.enumerate() {
        if v > best {
            best = v;
            arg = i;
        }
    }
    arg
}

/// Lengths of maximal runs of each state, indexed by state.
pub fn run_lengths(sequences: &[Vec<usize>], states: usize) -> Vec<Vec<usize>> {
    let mut runs = vec![Vec::new(); states];
    for seq in sequences {
        let mut t = 0;
        while t < seq.len() {
            let s = seq[t];
            let start = t;
            while t < seq.len() && seq[t] == s {
                t += 1;
            }
            if s < states {
                runs[s].push(t - start);
            }
        }
    }
    runs
}

/// Duration Gaussians from run lengths: mean and population variance,
/// variance floored. Unvisited states get `(1, floor)`.
pub fn durations_from_sequences(sequences: &[Vec<usize>], states: usize) -> Vec<DurationModel> {
    run_lengths(sequences, states)
        .into_iter()
        .enumerate()
        .map(|(i, runs)| {
            if runs.is_empty() {
                warn!("state {i} is never visited by the most likely state sequences");
                return DurationModel {
                    mean: 1.0,
                    var: DURATION_VAR_FLOOR,
                };
            }
            let n = runs.len() as f64;
            let mean = runs.iter().sum::<usize>() as f64 / n;
            let var = runs.iter().map(|&r| (r as f64 - mean).powi(2)).sum::<f64>() / n;
            DurationModel {
                mean,
                var: var.max(DURATION_VAR_FLOOR),
            }
        })
        .collect()
}

/// Re-estimate the duration models from the Viterbi paths of `demos`
/// (each given as one matrix per model frame).
pub fn estimate_durations(model: &HsmmModel, demos: &[Vec<DMatrix<f64>>]) -> Result<HsmmModel> {
    let seqs: Vec<FrameRows> = demos.iter().map(|d| d.iter().map(rows_of).collect()).collect();
    estimate_durations_rows(model, &seqs)
}

fn estimate_durations_rows(model: &HsmmModel, seqs: &[FrameRows]) -> Result<HsmmModel> {
    let paths: Vec<Vec<usize>> = seqs
        .iter()
        .map(|s| {
            let le = log_emissions_rows(model, s)?;
            Ok(viterbi_log(&model.priors, &model.transitions, &le))
        })
        .collect::<Result<_>>()?;
    let mut out = model.clone();
    out.durations = durations_from_sequences(&paths, model.n_states());
    Ok(out)
}

// ---------------------------------------------------------------------------
// Duration-aware forward recursion

/// Unnormalized log forward quantities of the explicit-duration recursion.
#[derive(Debug, Clone)]
pub struct DurationForward {
    /// `log P(segment of state i ends at t, observed prefix)`.
    pub log_segment_end: DMatrix<f64>,
    /// `log P(z_t = i, observed prefix)`.
    pub log_occupancy: DMatrix<f64>,
}

/// Explicit-duration forward recursion.
///
/// `log_dur[(i, s - 1)]` is `log N(s | mu_i^S, Sigma_i^S)` for `s = 1..=s_max`;
/// `log_emis` covers the observed prefix only (later steps use unit
/// emission). A segment that starts at the first step may last up to
/// `s_max` steps; later segments start after the end of another segment
/// with probability given by `seg_trans`.
pub fn duration_forward(
    log_priors: &DVector<f64>,
    seg_trans: &DMatrix<f64>,
    log_dur: &DMatrix<f64>,
    log_emis: &DMatrix<f64>,
    horizon: usize,
) -> DurationForward {
    let k = log_priors.len();
    let s_max = log_dur.ncols();
    let log_a = ln_matrix(seg_trans);
    // cumulative prefix emission sums: cum[(t, i)] = sum_{c < t} e_c(i)
    let mut cum: DMatrix<f64> = DMatrix::zeros(horizon + 1, k);
    for t in 0..horizon {
        for i in 0..k {
            let e = if t < log_emis.nrows() { log_emis[(t, i)] } else { 0.0 };
            cum[(t + 1, i)] = cum[(t, i)] + e;
        }
    }
    // log survival: P(duration >= s)
    let mut log_surv = DMatrix::from_element(k, s_max, f64::NEG_INFINITY);
    for i in 0..k {
        let mut acc = f64::NEG_INFINITY;
        for s in (0..s_max).rev() {
            acc = log_sum_exp(&[acc, log_dur[(i, s)]]);
            log_surv[(i, s)] = acc;
        }
    }
    let mut start = DMatrix::from_element(horizon, k, f64::NEG_INFINITY);
    let mut end = DMatrix::from_element(horizon, k, f64::NEG_INFINITY);
    let mut occ = DMatrix::from_element(horizon, k, f64::NEG_INFINITY);
    let mut buf_end = Vec::with_capacity(s_max);
    let mut buf_occ = Vec::with_capacity(s_max);
    let mut buf_k = vec![0.0; k];
    for t in 0..horizon {
        for i in 0..k {
            start[(t, i)] = if t == 0 {
                log_priors[i]
            } else {
                for j in 0..k {
                    buf_k[j] = end[(t - 1, j)] + log_a[(j, i)];
                }
                log_sum_exp(&buf_k)
            };
        }
        for i in 0..k {
            buf_end.clear();
            buf_occ.clear();
            for s in 1..=s_max.min(t + 1) {
                let begin = t + 1 - s;
                let emis = cum[(t + 1, i)] - cum[(begin, i)];
                buf_end.push(start[(begin, i)] + log_dur[(i, s - 1)] + emis);
                buf_occ.push(start[(begin, i)] + log_surv[(i, s - 1)] + emis);
            }
            end[(t, i)] = log_sum_exp(&buf_end);
            occ[(t, i)] = log_sum_exp(&buf_occ);
        }
    }
    DurationForward {
        log_segment_end: end,
        log_occupancy: occ,
    }
}

fn duration_table(model: &HsmmModel) -> DMatrix<f64> {
    DMatrix::from_fn(model.n_states(), model.s_max, |i, s| model.durations[i].log_density(s + 1))
}

fn model_duration_forward(model: &HsmmModel, obs_prefix: &DMatrix<f64>, horizon: usize) -> Result<DurationForward> {
    if model.n_frames() != 1 {
        return input("duration-aware decoding needs a single-frame model; adapt the model to a frame set first");
    }
    if obs_prefix.nrows() == 0 {
        return input("observation prefix must contain at least one step");
    }
    if horizon == 0 {
        return input("horizon must be at least 1");
    }
    if obs_prefix.ncols() != model.dim() {
        return input(format!(
            "observations have dimension {} but the model has dimension {}",
            obs_prefix.ncols(),
            model.dim()
        ));
    }
    let le = log_emissions(model, std::slice::from_ref(obs_prefix))?;
    Ok(duration_forward(
        &model.priors.map(f64::ln),
        &model.segment_transitions(),
        &duration_table(model),
        &le,
        horizon,
    ))
}

fn normalize_rows(log_m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(log_m.nrows(), log_m.ncols());
    for t in 0..log_m.nrows() {
        let row: Vec<f64> = log_m.row(t).iter().copied().collect();
        let norm = log_sum_exp(&row);
        for i in 0..row.len() {
            out[(t, i)] = if norm.is_finite() { (row[i] - norm).exp() } else { 0.0 };
        }
    }
    out
}

/// Rescaled duration-aware forward variable (probability that a segment of
/// each state ends at each step) over `horizon` steps, conditioned on the
/// observed prefix. Rows sum to one.
pub fn hsmm_forward(model: &HsmmModel, obs_prefix: &DMatrix<f64>, horizon: usize) -> Result<DMatrix<f64>> {
    let fwd = model_duration_forward(model, obs_prefix, horizon)?;
    Ok(normalize_rows(&fwd.log_segment_end))
}

/// Rescaled state-occupancy form of the duration-aware forward variable,
/// `P(z_t = i | observed prefix)`. Rows sum to one.
pub fn hsmm_occupancy(model: &HsmmModel, obs_prefix: &DMatrix<f64>, horizon: usize) -> Result<DMatrix<f64>> {
    let fwd = model_duration_forward(model, obs_prefix, horizon)?;
    Ok(normalize_rows(&fwd.log_occupancy))
}

/// One step of a reference trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceStep {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub state: usize,
}

/// Step-wise sequence of Gaussian targets.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory {
    pub steps: Vec<ReferenceStep>,
}

impl ReferenceTrajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn states(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.state).collect()
    }

    pub fn dim(&self) -> usize {
        self.steps.first().map_or(0, |s| s.mean.len())
    }

    /// Build a reference from a state sequence of a single-frame model.
    pub fn from_states(model: &HsmmModel, states: &[usize]) -> Result<Self> {
        if model.n_frames() != 1 {
            return input("reference trajectories need a single-frame model");
        }
        let steps = states
            .iter()
            .map(|&s| {
                if s >= model.n_states() {
                    return input(format!("state {s} out of range"));
                }
                let g = model.emission(s);
                Ok(ReferenceStep {
                    mean: g.mean().clone(),
                    cov: g.cov().clone(),
                    state: s,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { steps })
    }
}

/// Per-step argmax of a (possibly rescaled) forward matrix, ties to the
/// lowest state index.
pub fn argmax_path(forward: &DMatrix<f64>) -> Vec<usize> {
    (0..forward.nrows()).map(|t| argmax(forward.row(t).iter().copied())).collect()
}

/// Deterministic step-wise reference: the most probable state at each step
/// of the horizon given only the initial observation, with each step's
/// target copied from that state's emission Gaussian.
pub fn decode_reference(model: &HsmmModel, initial_obs: &DVector<f64>, horizon: usize) -> Result<ReferenceTrajectory> {
    let prefix = DMatrix::from_row_slice(1, initial_obs.len(), initial_obs.as_slice());
    let fwd = model_duration_forward(model, &prefix, horizon)?;
    let path = argmax_path(&fwd.log_occupancy);
    ReferenceTrajectory::from_states(model, &path)
}

/// Stochastic state sequence: the first state from the priors, each
/// duration drawn from the state's duration Gaussian (rounded, clamped to
/// `[1, s_max]`), and the next state from the segment transition row.
pub fn sample_states_stochastic(model: &HsmmModel, horizon: usize, seed: u64) -> Result<Vec<usize>> {
    if horizon == 0 {
        return input("horizon must be at least 1");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seg = model.segment_transitions();
    let mut state = sample_categorical(model.priors.iter().copied(), &mut rng);
    let mut out = Vec::with_capacity(horizon);
    while out.len() < horizon {
        let dur = model.durations[state];
        let draw = if dur.var > 0.0 {
            Normal::new(dur.mean, dur.var.sqrt())
                .map_err(|e| Error::Numeric(format!("invalid duration model: {e}")))?
                .sample(&mut rng)
        } else {
            dur.mean
        };
        let steps = (draw.round().max(1.0) as usize).min(model.s_max.max(1));
        out.extend(std::iter::repeat_n(state, steps));
        state = sample_categorical(seg.row(state).iter().copied(), &mut rng);
    }
    out.truncate(horizon);
    Ok(out)
}

fn sample_categorical(probs: impl Iterator<Item = f64> + Clone, rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = probs.clone().sum();
    let mut target = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, p) in probs.enumerate() {
        if p > 0.0 {
            last = i;
            if target < p {
                return i;
            }
        }
        target -= p;
    }
    last
}
