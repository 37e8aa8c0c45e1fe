//! Nonparametric sequence clustering in the small-variance limit.
//!
//! Every cluster is a mean plus a low-dimensional subspace. Points are
//! assigned greedily by exact loss deltas, new clusters are spawned when
//! that is strictly cheaper, and subspace dimensions grow when the drop in
//! distortion exceeds the per-dimension penalty.

use nalgebra::{DMatrix, DVector};

use crate::error::{input, Result};
use crate::gaussian::Gaussian;
use crate::latent::CovarianceStructure;
use crate::linalg::{rows_of, sorted_sym_eigen};
use crate::markov::{durations_from_sequences, DurationModel, HsmmModel, TRANSITION_SMOOTHING};

/// Hyperparameters of the clustering loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvaHyper {
    /// Cost of each cluster beyond the first.
    pub lambda: f64,
    /// Cost of each subspace dimension.
    pub lambda1: f64,
    /// Weight of the transition log-probabilities.
    pub lambda2: f64,
    /// Cost of each distinct out-transition beyond the first.
    pub lambda3: f64,
    /// Bandwidth `b_m` of the subspace weight (squared units).
    pub bandwidth: f64,
    /// Residual scale; `sigma^2` is the isotropic term of the finished covariances.
    pub sigma: f64,
}

impl Default for SvaHyper {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            lambda1: 0.1,
            lambda2: 0.1,
            lambda3: 0.1,
            bandwidth: 1.0,
            sigma: 0.1,
        }
    }
}

impl SvaHyper {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(ok(self.lambda) && ok(self.lambda1) && ok(self.lambda2) && ok(self.lambda3)) {
            return input("SVA penalties must be finite and non-negative");
        }
        if !(self.bandwidth.is_finite() && self.bandwidth > 0.0) {
            return input("SVA bandwidth must be positive");
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return input("SVA residual scale must be positive");
        }
        Ok(())
    }
}

/// Twice the median pairwise squared distance of `prefix`.
pub fn calibrate_bandwidth(prefix: &[DVector<f64>]) -> Result<f64> {
    let mut d2 = Vec::new();
    for i in 0..prefix.len() {
        for j in i + 1..prefix.len() {
            d2.push((&prefix[i] - &prefix[j]).norm_squared());
        }
    }
    if d2.is_empty() {
        return input("bandwidth calibration needs at least two points");
    }
    d2.sort_by(f64::total_cmp);
    let n = d2.len();
    let median = if n % 2 == 1 { d2[n / 2] } else { 0.5 * (d2[n / 2 - 1] + d2[n / 2]) };
    if median <= 0.0 {
        return input("calibration points are all identical");
    }
    Ok(2.0 * median)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvaCluster {
    pub mean: DVector<f64>,
    /// Orthonormal basis of the cluster subspace (`D x d`).
    pub basis: DMatrix<f64>,
    pub count: usize,
    /// Sum of outer products of deviations from the mean.
    pub scatter: DMatrix<f64>,
}

impl SvaCluster {
    fn seeded(x: &DVector<f64>) -> Self {
        let d = x.len();
        Self {
            mean: x.clone(),
            basis: DMatrix::zeros(d, 0),
            count: 1,
            scatter: DMatrix::zeros(d, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }
}

/// Squared subspace distance for an explicit mean and basis.
fn distortion(x: &DVector<f64>, mean: &DVector<f64>, basis: &DMatrix<f64>, bandwidth: f64) -> f64 {
    let r = x - mean;
    let n2 = r.norm_squared();
    if basis.ncols() == 0 {
        return n2;
    }
    let rho = (-n2 / bandwidth).exp();
    let p2 = (basis.transpose() * &r).norm_squared();
    (n2 - (2.0 * rho - rho * rho) * p2).max(0.0)
}

/// `||(x - mu) - rho U U^T (x - mu)||` with `rho = exp(-||x - mu||^2 / b_m)`.
pub fn subspace_distance(x: &DVector<f64>, cluster: &SvaCluster, bandwidth: f64) -> f64 {
    let r = x - &cluster.mean;
    if cluster.dim() == 0 {
        return r.norm();
    }
    let rho = (-r.norm_squared() / bandwidth).exp();
    (&r - &cluster.basis * (cluster.basis.transpose() * &r) * rho).norm()
}

/// Evolving clustering of a stream of (possibly several) sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct SvaState {
    pub dim: usize,
    pub clusters: Vec<SvaCluster>,
    /// `transition_counts[i][j]` counts steps from cluster `i` to `j`.
    pub transition_counts: Vec<Vec<u64>>,
    pub assignments: Vec<usize>,
    /// Index into `assignments` where each sequence starts.
    pub sequence_starts: Vec<usize>,
    pub last_state: Option<usize>,
}

fn row_cost(row: &[u64], hyper: &SvaHyper) -> f64 {
    let total: u64 = row.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let total = total as f64;
    let mut log_term = 0.0;
    let mut distinct = 0usize;
    for &n in row.iter().filter(|&&n| n > 0) {
        let n = n as f64;
        log_term += n * (n / total).ln();
        distinct += 1;
    }
    -hyper.lambda2 * log_term + hyper.lambda3 * distinct.saturating_sub(1) as f64
}

impl SvaState {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            clusters: Vec::new(),
            transition_counts: Vec::new(),
            assignments: Vec::new(),
            sequence_starts: Vec::new(),
            last_state: None,
        }
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    /// Number of distinct out-transitions of cluster `i`.
    pub fn tau(&self, i: usize) -> usize {
        self.transition_counts[i].iter().filter(|&&n| n > 0).count()
    }

    /// Mark the start of a new sequence; no transition links it to the previous one.
    pub fn start_sequence(&mut self) {
        self.last_state = None;
        self.sequence_starts.push(self.assignments.len());
    }

    fn transition_term(&self, hyper: &SvaHyper) -> f64 {
        self.transition_counts.iter().map(|r| row_cost(r, hyper)).sum()
    }

    fn push_cluster(&mut self, x: &DVector<f64>) -> usize {
        self.clusters.push(SvaCluster::seeded(x));
        for row in &mut self.transition_counts {
            row.push(0);
        }
        let k = self.clusters.len();
        self.transition_counts.push(vec![0; k]);
        k - 1
    }

    /// Change of the transition term when one step from `from` to `to` is added.
    fn added_transition_cost(&self, from: Option<usize>, to: usize, hyper: &SvaHyper) -> f64 {
        let Some(from) = from else { return 0.0 };
        let k = self.clusters.len();
        let mut row: Vec<u64> = self.transition_counts[from].clone();
        if to >= k {
            row.push(0);
        }
        let before = row_cost(&row, hyper);
        row[to] += 1;
        row_cost(&row, hyper) - before
    }

    /// Assign one observation and update the winning cluster.
    pub fn observe(&mut self, x: &DVector<f64>, hyper: &SvaHyper) -> Result<usize> {
        if x.len() != self.dim {
            return input(format!("observation has dimension {} but the clustering has {}", x.len(), self.dim));
        }
        if self.sequence_starts.is_empty() {
            self.sequence_starts.push(0);
        }
        let last = self.last_state;
        let k = self.clusters.len();
        let mut best = None;
        let mut best_cost = f64::INFINITY;
        for c in 0..k {
            let cost = distortion(x, &self.clusters[c].mean, &self.clusters[c].basis, hyper.bandwidth)
                + self.added_transition_cost(last, c, hyper);
            if cost < best_cost {
                best_cost = cost;
                best = Some(c);
            }
        }
        let spawn = hyper.lambda + self.added_transition_cost(last, k, hyper);
        let chosen = match best {
            Some(c) if best_cost <= spawn => {
                self.absorb(c, x, hyper);
                c
            }
            _ => self.push_cluster(x),
        };
        if let Some(p) = last {
            self.transition_counts[p][chosen] += 1;
        }
        self.assignments.push(chosen);
        self.last_state = Some(chosen);
        Ok(chosen)
    }

    fn absorb(&mut self, c: usize, x: &DVector<f64>, hyper: &SvaHyper) {
        let cl = &mut self.clusters[c];
        cl.count += 1;
        let before = x - &cl.mean;
        cl.mean += &before / cl.count as f64;
        let after = x - &cl.mean;
        cl.scatter += &before * after.transpose();
        cl.scatter = crate::linalg::symmetrize(&cl.scatter);
        if cl.count.is_power_of_two() {
            let (values, vectors) = sorted_sym_eigen(&cl.scatter);
            let mut d = cl.dim();
            if d < self.dim && values[d] > hyper.lambda1 {
                d += 1;
            }
            cl.basis = vectors.columns(0, d).into_owned();
        }
    }
}

/// Functional form of [`SvaState::observe`].
pub fn sva_observe(state: &SvaState, x: &DVector<f64>, hyper: &SvaHyper) -> Result<SvaState> {
    let mut next = state.clone();
    next.observe(x, hyper)?;
    Ok(next)
}

fn check_data(state: &SvaState, data: &[DVector<f64>]) -> Result<()> {
    if data.len() != state.assignments.len() {
        return input(format!(
            "{} observations given for {} assignments",
            data.len(),
            state.assignments.len()
        ));
    }
    if data.iter().any(|x| x.len() != state.dim) {
        return input(format!("observations must have dimension {}", state.dim));
    }
    Ok(())
}

/// Total loss: distortion, cluster count, subspace dimensions, transition
/// log-probabilities and distinct transitions.
pub fn sva_loss(state: &SvaState, data: &[DVector<f64>], hyper: &SvaHyper) -> Result<f64> {
    check_data(state, data)?;
    let dist: f64 = data
        .iter()
        .zip(&state.assignments)
        .map(|(x, &z)| {
            let c = &state.clusters[z];
            distortion(x, &c.mean, &c.basis, hyper.bandwidth)
        })
        .sum();
    let k = state.clusters.len();
    let dims: usize = state.clusters.iter().map(SvaCluster::dim).sum();
    Ok(dist
        + hyper.lambda * k.saturating_sub(1) as f64
        + hyper.lambda1 * dims as f64
        + state.transition_term(hyper))
}

fn neighbours(state: &SvaState, t: usize) -> (Option<usize>, Option<usize>) {
    let starts = &state.sequence_starts;
    let is_start = starts.binary_search(&t).is_ok() || t == 0;
    let next_is_start = t + 1 >= state.assignments.len() || starts.binary_search(&(t + 1)).is_ok();
    let prev = (!is_start).then(|| state.assignments[t - 1]);
    let next = (!next_is_start).then(|| state.assignments[t + 1]);
    (prev, next)
}

/// Change of the transition term when step `t` moves from `old` to `new`.
fn reassign_transition_delta(
    counts: &mut [Vec<u64>],
    prev: Option<usize>,
    next: Option<usize>,
    old: usize,
    new: usize,
    hyper: &SvaHyper,
) -> f64 {
    let mut rows: Vec<usize> = [prev, Some(old), Some(new)].into_iter().flatten().collect();
    rows.sort_unstable();
    rows.dedup();
    let before: f64 = rows.iter().map(|&r| row_cost(&counts[r], hyper)).sum();
    if let Some(p) = prev {
        counts[p][old] -= 1;
        counts[p][new] += 1;
    }
    if let Some(q) = next {
        counts[old][q] -= 1;
        counts[new][q] += 1;
    }
    let after: f64 = rows.iter().map(|&r| row_cost(&counts[r], hyper)).sum();
    if let Some(p) = prev {
        counts[p][new] -= 1;
        counts[p][old] += 1;
    }
    if let Some(q) = next {
        counts[new][q] -= 1;
        counts[old][q] += 1;
    }
    after - before
}

/// One batch pass over the stored stream: reassignment (with spawning),
/// mean update, basis update and dimension growth. Never increases the loss.
pub fn sva_sweep(state: &mut SvaState, data: &[DVector<f64>], hyper: &SvaHyper) -> Result<()> {
    check_data(state, data)?;
    hyper.validate()?;
    for t in 0..data.len() {
        let x = &data[t];
        let (prev, next) = neighbours(state, t);
        let old = state.assignments[t];
        let current = distortion(x, &state.clusters[old].mean, &state.clusters[old].basis, hyper.bandwidth);
        let mut best = old;
        let mut best_delta = 0.0;
        for c in 0..state.clusters.len() {
            if c == old {
                continue;
            }
            let cl = &state.clusters[c];
            let delta = distortion(x, &cl.mean, &cl.basis, hyper.bandwidth) - current
                + reassign_transition_delta(&mut state.transition_counts, prev, next, old, c, hyper);
            if delta < best_delta {
                best_delta = delta;
                best = c;
            }
        }
        // spawning a cluster at x
        let k = state.clusters.len();
        let mut grown = state.transition_counts.clone();
        for row in &mut grown {
            row.push(0);
        }
        grown.push(vec![0; k + 1]);
        let spawn_delta =
            hyper.lambda - current + reassign_transition_delta(&mut grown, prev, next, old, k, hyper);
        if spawn_delta < best_delta {
            state.push_cluster(x);
            best = k;
        }
        if best != old {
            if let Some(p) = prev {
                state.transition_counts[p][old] -= 1;
                state.transition_counts[p][best] += 1;
            }
            if let Some(q) = next {
                state.transition_counts[old][q] -= 1;
                state.transition_counts[best][q] += 1;
            }
            state.assignments[t] = best;
        }
    }
    refit_clusters(state, data, hyper);
    Ok(())
}

fn members<'a>(state: &SvaState, data: &'a [DVector<f64>], c: usize) -> Vec<&'a DVector<f64>> {
    data.iter()
        .zip(&state.assignments)
        .filter(|(_, &z)| z == c)
        .map(|(x, _)| x)
        .collect()
}

fn cluster_distortion(points: &[&DVector<f64>], mean: &DVector<f64>, basis: &DMatrix<f64>, b: f64) -> f64 {
    points.iter().map(|x| distortion(x, mean, basis, b)).sum()
}

fn refit_clusters(state: &mut SvaState, data: &[DVector<f64>], hyper: &SvaHyper) {
    let dim = state.dim;
    let b = hyper.bandwidth;
    for c in 0..state.clusters.len() {
        let pts = members(state, data, c);
        let cl = &mut state.clusters[c];
        cl.count = pts.len();
        if pts.is_empty() {
            cl.scatter = DMatrix::zeros(dim, dim);
            continue;
        }
        let avg = pts.iter().fold(DVector::zeros(dim), |acc, x| acc + *x) / pts.len() as f64;
        if cl.dim() == 0 || cluster_distortion(&pts, &avg, &cl.basis, b) <= cluster_distortion(&pts, &cl.mean, &cl.basis, b) {
            cl.mean = avg;
        }
        let mut scatter = DMatrix::zeros(dim, dim);
        for x in &pts {
            let r = *x - &cl.mean;
            scatter.ger(1.0, &r, &r, 1.0);
        }
        cl.scatter = crate::linalg::symmetrize(&scatter);
        let (_, vectors) = sorted_sym_eigen(&cl.scatter);
        let d = cl.dim();
        let mut current = cluster_distortion(&pts, &cl.mean, &cl.basis, b);
        if d > 0 {
            let candidate = vectors.columns(0, d).into_owned();
            let value = cluster_distortion(&pts, &cl.mean, &candidate, b);
            if value <= current {
                cl.basis = candidate;
                current = value;
            }
        }
        if d < dim {
            let candidate = vectors.columns(0, d + 1).into_owned();
            let value = cluster_distortion(&pts, &cl.mean, &candidate, b);
            if current - value > hyper.lambda1 {
                cl.basis = candidate;
            }
        }
    }
}

/// Result of [`sva_fit`].
#[derive(Debug, Clone)]
pub struct SvaFit {
    pub state: SvaState,
    /// Loss after the online pass and after every batch sweep.
    pub losses: Vec<f64>,
}

/// Stream every sequence once, then run batch sweeps until the loss stops
/// decreasing by more than `1e-9` or `max_sweeps` is reached.
pub fn sva_fit(sequences: &[DMatrix<f64>], hyper: &SvaHyper, max_sweeps: usize) -> Result<SvaFit> {
    hyper.validate()?;
    let Some(first) = sequences.first() else {
        return input("clustering needs at least one sequence");
    };
    let dim = first.ncols();
    if dim == 0 {
        return input("sequences must have dimension >= 1");
    }
    let mut state = SvaState::new(dim);
    let mut data = Vec::new();
    for (m, seq) in sequences.iter().enumerate() {
        if seq.ncols() != dim {
            return input(format!("sequence {m} has dimension {} instead of {dim}", seq.ncols()));
        }
        state.start_sequence();
        for x in rows_of(seq) {
            state.observe(&x, hyper)?;
            data.push(x);
        }
    }
    let mut losses = vec![sva_loss(&state, &data, hyper)?];
    for _ in 0..max_sweeps {
        sva_sweep(&mut state, &data, hyper)?;
        let loss = sva_loss(&state, &data, hyper)?;
        let prev = *losses.last().expect("non-empty");
        losses.push(loss);
        if prev - loss <= 1e-9 {
            break;
        }
    }
    Ok(SvaFit { state, losses })
}

/// Convert a clustering into an HSMM: means, subspace-plus-isotropic
/// covariances, transitions from counts, durations from run lengths.
pub fn sva_to_hsmm(state: &SvaState, data: &[DVector<f64>], hyper: &SvaHyper) -> Result<HsmmModel> {
    check_data(state, data)?;
    let k = state.clusters.len();
    if k == 0 {
        return input("clustering is empty");
    }
    let dim = state.dim;
    let s2 = hyper.sigma * hyper.sigma;
    let emissions = state
        .clusters
        .iter()
        .map(|cl| {
            let mut cov = DMatrix::identity(dim, dim) * s2;
            if cl.dim() > 0 && cl.count > 0 {
                let spread = cl.basis.transpose() * &cl.scatter * &cl.basis / cl.count as f64;
                let diag = DMatrix::from_diagonal(&spread.diagonal());
                cov += &cl.basis * diag * cl.basis.transpose();
            }
            Ok(vec![Gaussian::new(cl.mean.clone(), crate::linalg::symmetrize(&cov))?])
        })
        .collect::<Result<Vec<_>>>()?;

    let mut starts = state.sequence_starts.clone();
    if starts.first() != Some(&0) {
        starts.insert(0, 0);
    }
    let mut priors = DVector::zeros(k);
    let mut sequences = Vec::new();
    for (n, &s) in starts.iter().enumerate() {
        let end = starts.get(n + 1).copied().unwrap_or(state.assignments.len());
        if end > s {
            priors[state.assignments[s]] += 1.0;
            sequences.push(state.assignments[s..end].to_vec());
        }
    }
    let total = priors.sum();
    if total == 0.0 {
        return input("clustering has no observations");
    }
    priors /= total;
    let mut transitions = DMatrix::zeros(k, k);
    for i in 0..k {
        let row_total: f64 = state.transition_counts[i].iter().map(|&n| n as f64 + TRANSITION_SMOOTHING).sum();
        for j in 0..k {
            transitions[(i, j)] = (state.transition_counts[i][j] as f64 + TRANSITION_SMOOTHING) / row_total;
        }
    }
    let durations: Vec<DurationModel> = durations_from_sequences(&sequences, k);
    let s_max = sequences.iter().map(Vec::len).max().unwrap_or(1).max(1);
    Ok(HsmmModel {
        priors,
        transitions,
        emissions,
        durations,
        s_max,
        structure: CovarianceStructure::Full,
        latent: None,
    })
}
