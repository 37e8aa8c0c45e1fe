//! Discrete-time linear quadratic tracking of a step-wise reference.
//!
//! Cost: `sum_t (x_t - mu_t)' Q_t (x_t - mu_t) + sum_{t < T-1} u_t' R u_t`
//! subject to `x_{t+1} = A x_t + B u_t`. The optimal control is
//! `u_t = K_t (mu_t - x_t) + u_ff_t`.

use nalgebra::{Cholesky, DMatrix, DVector, Schur};
use num_complex::Complex64;

use crate::error::{input, numeric, Result};
use crate::linalg::{is_finite_matrix, symmetrize};
use crate::markov::ReferenceTrajectory;

/// Default control weight `r` in `R = r I`.
pub const DEFAULT_CONTROL_WEIGHT: f64 = 9.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Seconds per step.
    pub dt: f64,
}

impl LinearSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, dt: f64) -> Result<Self> {
        if !a.is_square() || b.nrows() != a.nrows() || b.ncols() == 0 {
            return input("system matrices have inconsistent shapes");
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return input("time step must be positive");
        }
        Ok(Self { a, b, dt })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b.ncols()
    }
}

/// Stacked `[position; velocity]` double integrator with `m` position axes.
pub fn double_integrator(m: usize, dt: f64) -> Result<LinearSystem> {
    if m == 0 {
        return input("double integrator needs at least one axis");
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return input("time step must be positive");
    }
    let n = 2 * m;
    let mut a = DMatrix::identity(n, n);
    let mut b = DMatrix::zeros(n, m);
    for i in 0..m {
        a[(i, m + i)] = dt;
        b[(i, i)] = 0.5 * dt * dt;
        b[(m + i, i)] = dt;
    }
    Ok(LinearSystem { a, b, dt })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    pub q: Vec<DMatrix<f64>>,
    pub r: DMatrix<f64>,
}

fn spd_inv(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    match Cholesky::new(symmetrize(m)) {
        Some(c) => Ok(symmetrize(&c.inverse())),
        None => numeric(format!("{what} is not positive definite")),
    }
}

/// Reference dimension must be the full state or its position block.
fn check_reference(sys: &LinearSystem, reference: &ReferenceTrajectory) -> Result<usize> {
    if reference.is_empty() {
        return input("reference trajectory is empty");
    }
    let n = sys.state_dim();
    let d = reference.dim();
    if d != n && 2 * d != n {
        return input(format!(
            "reference dimension {d} matches neither the state ({n}) nor its position block"
        ));
    }
    Ok(d)
}

/// `Q_t` is the inverse reference covariance (on the position block with
/// zero velocity weight for position-only references); `R = r I`.
pub fn weights_from_reference(sys: &LinearSystem, reference: &ReferenceTrajectory, r_scalar: f64) -> Result<CostWeights> {
    let d = check_reference(sys, reference)?;
    if !(r_scalar > 0.0 && r_scalar.is_finite()) {
        return input("control weight must be positive");
    }
    let n = sys.state_dim();
    let q = reference
        .steps
        .iter()
        .enumerate()
        .map(|(t, s)| {
            let prec = spd_inv(&s.cov, &format!("reference covariance at step {t}"))?;
            let mut q = DMatrix::zeros(n, n);
            q.view_mut((0, 0), (d, d)).copy_from(&prec);
            Ok(q)
        })
        .collect::<Result<_>>()?;
    Ok(CostWeights {
        q,
        r: DMatrix::identity(sys.control_dim(), sys.control_dim()) * r_scalar,
    })
}

/// Targets in state space: the reference means, padded with zero velocity
/// when the reference is position-only.
pub fn target_states(sys: &LinearSystem, reference: &ReferenceTrajectory) -> Result<Vec<DVector<f64>>> {
    let d = check_reference(sys, reference)?;
    let n = sys.state_dim();
    Ok(reference
        .steps
        .iter()
        .map(|s| {
            let mut x = DVector::zeros(n);
            x.rows_mut(0, d).copy_from(&s.mean);
            x
        })
        .collect())
}

/// Time-varying feedback gains, feedforward terms and value-function data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackerGains {
    pub k: Vec<DMatrix<f64>>,
    pub uff: Vec<DVector<f64>>,
    pub p: Vec<DMatrix<f64>>,
    pub d: Vec<DVector<f64>>,
}

impl TrackerGains {
    pub fn len(&self) -> usize {
        self.k.len()
    }

    pub fn is_empty(&self) -> bool {
        self.k.is_empty()
    }

    /// Stiffness (position) and damping (velocity) blocks of `K_t` for a
    /// stacked double-integrator state.
    pub fn stiffness_damping(&self, t: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let k = &self.k[t];
        let m = k.ncols() / 2;
        (k.columns(0, m).into_owned(), k.columns(m, k.ncols() - m).into_owned())
    }
}

fn check_weights(sys: &LinearSystem, targets: &[DVector<f64>], w: &CostWeights) -> Result<()> {
    let n = sys.state_dim();
    let m = sys.control_dim();
    if targets.is_empty() {
        return input("horizon must be at least 1");
    }
    if w.q.len() != targets.len() {
        return input("one state weight per reference step is required");
    }
    if w.q.iter().any(|q| q.shape() != (n, n)) || w.r.shape() != (m, m) {
        return input("cost weights have inconsistent shapes");
    }
    if targets.iter().any(|x| x.len() != n) {
        return input(format!("targets must have dimension {n}"));
    }
    if Cholesky::new(symmetrize(&w.r)).is_none() {
        return numeric("control weight R is not positive definite");
    }
    Ok(())
}

/// Backward Riccati and feedforward recursions from `P_T = Q_T`, `d_T = 0`.
pub fn riccati_backward(sys: &LinearSystem, targets: &[DVector<f64>], weights: &CostWeights) -> Result<TrackerGains> {
    check_weights(sys, targets, weights)?;
    let (n, m) = (sys.state_dim(), sys.control_dim());
    let horizon = targets.len();
    let (a, b) = (&sys.a, &sys.b);
    let mut k = vec![DMatrix::zeros(m, n); horizon];
    let mut uff = vec![DVector::zeros(m); horizon];
    let mut p = vec![DMatrix::zeros(n, n); horizon];
    let mut d = vec![DVector::zeros(n); horizon];
    p[horizon - 1] = symmetrize(&weights.q[horizon - 1]);
    for t in (0..horizon - 1).rev() {
        let pn = &p[t + 1];
        let s = &weights.r + b.transpose() * pn * b;
        let g = match Cholesky::new(symmetrize(&s)) {
            Some(c) => c.inverse(),
            None => return numeric(format!("R + B'PB is singular at step {t}")),
        };
        let bt_p = b.transpose() * pn;
        let kt = &g * &bt_p * a;
        let c = a * &targets[t] - &targets[t + 1];
        let carry = pn * &c + &d[t + 1];
        uff[t] = -(&g * b.transpose() * &carry);
        d[t] = (a - b * &kt).transpose() * &carry;
        p[t] = symmetrize(&(&weights.q[t] + a.transpose() * pn * a - a.transpose() * bt_p.transpose() * &kt));
        k[t] = kt;
        if !is_finite_matrix(&p[t]) {
            return numeric(format!("Riccati recursion diverged at step {t}"));
        }
    }
    Ok(TrackerGains { k, uff, p, d })
}

/// Gains for a whole reference trajectory.
pub fn track_reference(sys: &LinearSystem, reference: &ReferenceTrajectory, r_scalar: f64) -> Result<(Vec<DVector<f64>>, TrackerGains)> {
    let weights = weights_from_reference(sys, reference, r_scalar)?;
    let targets = target_states(sys, reference)?;
    let gains = riccati_backward(sys, &targets, &weights)?;
    Ok((targets, gains))
}

fn complex(m: &DMatrix<f64>) -> DMatrix<Complex64> {
    m.map(|v| Complex64::new(v, 0.0))
}

/// Swap the adjacent diagonal entries `k`, `k+1` of an upper-triangular `t`,
/// updating the unitary `q` so that `q t q^H` is unchanged.
fn swap_schur(t: &mut DMatrix<Complex64>, q: &mut DMatrix<Complex64>, k: usize) {
    let (a, b, off) = (t[(k, k)], t[(k + 1, k + 1)], t[(k, k + 1)]);
    let (x, y) = (off, b - a);
    let norm = (x.norm_sqr() + y.norm_sqr()).sqrt();
    if norm == 0.0 {
        return;
    }
    let (c, s) = (x / norm, y / norm);
    // columns of G: [c, s] and [-conj(s), conj(c)]
    let n = t.nrows();
    for j in 0..n {
        let (u, v) = (t[(k, j)], t[(k + 1, j)]);
        t[(k, j)] = c.conj() * u + s.conj() * v;
        t[(k + 1, j)] = -s * u + c * v;
    }
    for i in 0..n {
        let (u, v) = (t[(i, k)], t[(i, k + 1)]);
        t[(i, k)] = u * c + v * s;
        t[(i, k + 1)] = -u * s.conj() + v * c.conj();
        let (u, v) = (q[(i, k)], q[(i, k + 1)]);
        q[(i, k)] = u * c + v * s;
        q[(i, k + 1)] = -u * s.conj() + v * c.conj();
    }
    t[(k + 1, k)] = Complex64::new(0.0, 0.0);
}

/// Right-hand side of the discrete algebraic Riccati equation.
pub fn dare_map(sys: &LinearSystem, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (a, b) = (&sys.a, &sys.b);
    let s = r + b.transpose() * p * b;
    let g = spd_inv(&s, "R + B'PB")?;
    let bpa = b.transpose() * p * a;
    Ok(symmetrize(&(q + a.transpose() * p * a - bpa.transpose() * g * bpa)))
}

/// Stabilizing solution of the discrete algebraic Riccati equation from the
/// stable invariant subspace of the symplectic matrix.
pub fn dare_solve(sys: &LinearSystem, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, m) = (sys.state_dim(), sys.control_dim());
    if q.shape() != (n, n) || r.shape() != (m, m) {
        return input("cost weights have inconsistent shapes");
    }
    if q.iter().all(|v| *v == 0.0) {
        return Ok(DMatrix::zeros(n, n));
    }
    let r_inv = spd_inv(r, "control weight R")?;
    let a_inv_t = match sys.a.clone().try_inverse() {
        Some(inv) => inv.transpose(),
        None => return numeric("system matrix A is singular"),
    };
    let g = &sys.b * r_inv * sys.b.transpose();
    let mut z = DMatrix::zeros(2 * n, 2 * n);
    z.view_mut((0, 0), (n, n)).copy_from(&(&sys.a + &g * &a_inv_t * q));
    z.view_mut((0, n), (n, n)).copy_from(&(-(&g * &a_inv_t)));
    z.view_mut((n, 0), (n, n)).copy_from(&(-(&a_inv_t * q)));
    z.view_mut((n, n), (n, n)).copy_from(&a_inv_t);

    let schur = Schur::try_new(complex(&z), f64::EPSILON, 10_000)
        .ok_or_else(|| crate::Error::Numeric("Schur decomposition did not converge".into()))?;
    let (mut u, mut t) = schur.unpack();
    let stable = |v: Complex64| v.norm() < 1.0;
    let count = (0..2 * n).filter(|&i| stable(t[(i, i)])).count();
    if count != n {
        return numeric(format!(
            "symplectic matrix has {count} eigenvalues inside the unit circle, expected {n}"
        ));
    }
    // bubble stable eigenvalues to the leading block
    for pass in 0..2 * n {
        let mut swapped = false;
        for k in 0..2 * n - 1 - pass.min(2 * n - 1) {
            if !stable(t[(k, k)]) && stable(t[(k + 1, k + 1)]) {
                swap_schur(&mut t, &mut u, k);
                swapped = true;
            }
        }
        if !swapped {
            break;
        }
    }
    let v1 = u.view((0, 0), (n, n)).into_owned();
    let v2 = u.view((n, 0), (n, n)).into_owned();
    let v1_inv = v1
        .try_inverse()
        .ok_or_else(|| crate::Error::Numeric("stable subspace basis is singular".into()))?;
    let p = symmetrize(&(v2 * v1_inv).map(|c| c.re));
    let residual = (&p - dare_map(sys, q, r, &p)?).norm();
    if !(residual <= 1e-8 * p.norm().max(1.0)) {
        return numeric(format!("Riccati residual {residual:e} exceeds tolerance"));
    }
    Ok(p)
}

/// Constant feedback for set-point tracking over `horizon` steps.
pub fn infinite_horizon_gains(sys: &LinearSystem, q: &DMatrix<f64>, r: &DMatrix<f64>, horizon: usize) -> Result<TrackerGains> {
    if horizon == 0 {
        return input("horizon must be at least 1");
    }
    let p = dare_solve(sys, q, r)?;
    let s = r + sys.b.transpose() * &p * &sys.b;
    let k = spd_inv(&s, "R + B'PB")? * sys.b.transpose() * &p * &sys.a;
    let (n, m) = (sys.state_dim(), sys.control_dim());
    Ok(TrackerGains {
        k: vec![k; horizon],
        uff: vec![DVector::zeros(m); horizon],
        p: vec![p; horizon],
        d: vec![DVector::zeros(n); horizon],
    })
}

/// Closed-loop simulation: states (`T x n`) and controls (`T x m`).
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub states: DMatrix<f64>,
    pub controls: DMatrix<f64>,
}

pub fn rollout(sys: &LinearSystem, gains: &TrackerGains, targets: &[DVector<f64>], x0: &DVector<f64>) -> Result<Rollout> {
    let (n, m) = (sys.state_dim(), sys.control_dim());
    if x0.len() != n {
        return input(format!("initial state must have dimension {n}"));
    }
    if gains.len() != targets.len() || targets.is_empty() {
        return input("gains and targets must cover the same non-empty horizon");
    }
    let horizon = targets.len();
    let mut states = DMatrix::zeros(horizon, n);
    let mut controls = DMatrix::zeros(horizon, m);
    let mut x = x0.clone();
    for t in 0..horizon {
        let u = &gains.k[t] * (&targets[t] - &x) + &gains.uff[t];
        states.set_row(t, &x.transpose());
        controls.set_row(t, &u.transpose());
        x = &sys.a * &x + &sys.b * &u;
    }
    Ok(Rollout { states, controls })
}

/// Open-loop states produced by a control sequence.
pub fn simulate(sys: &LinearSystem, x0: &DVector<f64>, controls: &DMatrix<f64>) -> DMatrix<f64> {
    let mut states = DMatrix::zeros(controls.nrows(), x0.len());
    let mut x = x0.clone();
    for t in 0..controls.nrows() {
        states.set_row(t, &x.transpose());
        x = &sys.a * &x + &sys.b * controls.row(t).transpose();
    }
    states
}

/// Tracking cost of a state/control sequence.
pub fn tracking_cost(targets: &[DVector<f64>], weights: &CostWeights, states: &DMatrix<f64>, controls: &DMatrix<f64>) -> f64 {
    let horizon = targets.len();
    let mut j = 0.0;
    for t in 0..horizon {
        let e = states.row(t).transpose() - &targets[t];
        j += (e.transpose() * &weights.q[t] * &e)[(0, 0)];
        if t + 1 < horizon {
            let u = controls.row(t).transpose();
            j += (u.transpose() * &weights.r * &u)[(0, 0)];
        }
    }
    j
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markov::ReferenceStep;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_system() -> LinearSystem {
        LinearSystem::new(DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 1.0), 1.0).unwrap()
    }

    fn reference(means: &[DVector<f64>], cov: DMatrix<f64>) -> ReferenceTrajectory {
        ReferenceTrajectory {
            steps: means
                .iter()
                .map(|m| ReferenceStep {
                    mean: m.clone(),
                    cov: cov.clone(),
                    state: 0,
                })
                .collect(),
        }
    }

    #[test]
    fn double_integrator_matrices() {
        let s = double_integrator(1, 0.1).unwrap();
        assert_eq!(s.a, DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]));
        assert!((s.b - DMatrix::from_row_slice(2, 1, &[0.005, 0.1])).amax() < 1e-15);
        let tiny = double_integrator(2, 1e-9).unwrap();
        assert!((tiny.a - DMatrix::identity(4, 4)).amax() < 1e-8);
        assert!(tiny.b.amax() < 1e-8);
        assert!(double_integrator(0, 0.1).is_err());
    }

    #[test]
    fn constant_input_matches_kinematics() {
        let dt = 0.01;
        let s = double_integrator(1, dt).unwrap();
        let u = 2.0;
        let k = 300;
        let states = simulate(&s, &DVector::zeros(2), &DMatrix::from_element(k + 1, 1, u));
        let pos = states[(k, 0)];
        let exact = 0.5 * u * (k as f64 * dt).powi(2);
        assert!((pos - exact).abs() < 10.0 * dt * dt);
    }

    #[test]
    fn weights_from_covariances() {
        let s = double_integrator(2, 0.1).unwrap();
        let r = reference(&[DVector::zeros(4)], DMatrix::identity(4, 4));
        let w = weights_from_reference(&s, &r, DEFAULT_CONTROL_WEIGHT).unwrap();
        assert!((&w.q[0] - DMatrix::identity(4, 4)).amax() < 1e-12);
        assert_eq!(w.r, DMatrix::identity(2, 2) * 9.0);

        let s1 = double_integrator(1, 0.1).unwrap();
        let r = reference(&[DVector::zeros(2)], DMatrix::from_diagonal(&DVector::from_vec(vec![0.01, 1.0])));
        let w = weights_from_reference(&s1, &r, 1.0).unwrap();
        assert!((w.q[0][(0, 0)] - 100.0).abs() < 1e-9 && (w.q[0][(1, 1)] - 1.0).abs() < 1e-12);

        let pos_only = reference(&[DVector::zeros(1)], DMatrix::from_element(1, 1, 0.25));
        let w = weights_from_reference(&s1, &pos_only, 1.0).unwrap();
        assert_eq!(w.q[0], DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 0.0]));

        let bad = reference(&[DVector::zeros(1)], DMatrix::from_element(1, 1, -1.0));
        assert!(matches!(weights_from_reference(&s1, &bad, 1.0), Err(crate::Error::Numeric(_))));
    }

    #[test]
    fn scalar_riccati_and_dare() {
        let s = scalar_system();
        let one = DMatrix::from_element(1, 1, 1.0);
        let w = CostWeights {
            q: vec![one.clone(); 2],
            r: one.clone(),
        };
        let g = riccati_backward(&s, &[DVector::zeros(1), DVector::zeros(1)], &w).unwrap();
        assert_eq!(g.p[1][(0, 0)], 1.0);
        assert_eq!(g.d[1][0], 0.0);
        assert!((g.p[0][(0, 0)] - 1.5).abs() < 1e-15);

        let p = dare_solve(&s, &one, &one).unwrap();
        assert!((p[(0, 0)] - (1.0 + 5f64.sqrt()) / 2.0).abs() < 1e-12);

        let stable = LinearSystem::new(DMatrix::from_element(1, 1, 0.5), one.clone(), 1.0).unwrap();
        assert_eq!(dare_solve(&stable, &DMatrix::zeros(1, 1), &one).unwrap(), DMatrix::zeros(1, 1));
    }

    fn recursion_limit(sys: &LinearSystem, q: &DMatrix<f64>, r: &DMatrix<f64>, steps: usize) -> DMatrix<f64> {
        let mut p = q.clone();
        for _ in 0..steps {
            p = dare_map(sys, q, r, &p).unwrap();
        }
        p
    }

    #[test]
    fn dare_matches_long_recursion_on_random_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..5 {
            let a = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
            let b = DMatrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0));
            let l = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
            let q = &l * l.transpose() + DMatrix::identity(4, 4) * 0.1;
            let r = DMatrix::identity(2, 2) * 0.5;
            let sys = LinearSystem::new(a, b, 1.0).unwrap();
            let p = dare_solve(&sys, &q, &r).unwrap();
            let limit = recursion_limit(&sys, &q, &r, 10_000);
            assert!((&p - &limit).amax() < 1e-7 * limit.amax().max(1.0), "{p} vs {limit}");
            let residual = (&p - dare_map(&sys, &q, &r, &p).unwrap()).norm();
            assert!(residual < 1e-8 * p.norm());
        }
    }

    #[test]
    fn double_integrator_dare_and_finite_horizon_agree() {
        let sys = double_integrator(2, 0.1).unwrap();
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![10.0, 5.0, 0.0, 0.0]));
        let r = DMatrix::identity(2, 2) * 9.0;
        let p = dare_solve(&sys, &q, &r).unwrap();
        let targets = vec![DVector::from_vec(vec![0.3, -0.2, 0.0, 0.0]); 3000];
        let w = CostWeights {
            q: vec![q.clone(); targets.len()],
            r,
        };
        let g = riccati_backward(&sys, &targets, &w).unwrap();
        assert!((&g.p[0] - &p).amax() < 1e-8 * p.amax());
    }

    #[test]
    fn equilibrium_needs_no_control() {
        let sys = double_integrator(2, 0.01).unwrap();
        let q = DMatrix::identity(4, 4);
        let r = DMatrix::identity(2, 2) * 9.0;
        let gains = infinite_horizon_gains(&sys, &q, &r, 50).unwrap();
        let target = DVector::from_vec(vec![0.4, -1.0, 0.0, 0.0]);
        let out = rollout(&sys, &gains, &vec![target.clone(); 50], &target).unwrap();
        assert!(out.controls.amax() == 0.0);
        for t in 0..50 {
            assert_eq!(out.states.row(t).transpose(), target);
        }
    }

    #[test]
    fn free_trajectory_is_reproduced() {
        let sys = double_integrator(1, 0.05).unwrap();
        let x0 = DVector::from_vec(vec![0.2, 0.7]);
        let path = simulate(&sys, &x0, &DMatrix::zeros(80, 1));
        let targets: Vec<DVector<f64>> = (0..80).map(|t| path.row(t).transpose()).collect();
        let w = CostWeights {
            q: vec![DMatrix::identity(2, 2) * 50.0; 80],
            r: DMatrix::identity(1, 1) * 9.0,
        };
        let g = riccati_backward(&sys, &targets, &w).unwrap();
        let out = rollout(&sys, &g, &targets, &x0).unwrap();
        assert!((&out.states - &path).amax() < 1e-9);
    }

    #[test]
    fn step_reference_settles() {
        let sys = double_integrator(1, 0.01).unwrap();
        let r = reference(&vec![DVector::from_element(1, 1.0); 1000], DMatrix::from_element(1, 1, 1e-4));
        let (targets, gains) = track_reference(&sys, &r, 9.0).unwrap();
        let out = rollout(&sys, &gains, &targets, &DVector::zeros(2)).unwrap();
        let settled = (0..1000).rev().take_while(|&t| (out.states[(t, 0)] - 1.0).abs() < 1e-3).count();
        assert!(settled > 100, "only the last {settled} steps are settled");
    }

    #[test]
    fn rollout_is_locally_optimal() {
        let sys = double_integrator(2, 0.05).unwrap();
        let means: Vec<DVector<f64>> = (0..40)
            .map(|t| DVector::from_vec(vec![if t < 20 { 0.0 } else { 1.0 }, (t as f64 * 0.1).sin()]))
            .collect();
        let cov = DMatrix::from_row_slice(2, 2, &[0.02, 0.005, 0.005, 0.05]);
        let r = reference(&means, cov);
        let w = weights_from_reference(&sys, &r, 9.0).unwrap();
        let (targets, gains) = track_reference(&sys, &r, 9.0).unwrap();
        let x0 = DVector::from_vec(vec![0.5, -0.5, 0.1, 0.0]);
        let out = rollout(&sys, &gains, &targets, &x0).unwrap();
        let best = tracking_cost(&targets, &w, &out.states, &out.controls);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let mut u = out.controls.clone();
            for v in u.iter_mut() {
                *v += rng.random_range(-0.05..0.05);
            }
            let states = simulate(&sys, &x0, &u);
            assert!(tracking_cost(&targets, &w, &states, &u) > best);
        }
    }

    #[test]
    fn gains_invariant_to_joint_scaling() {
        let sys = double_integrator(1, 0.1).unwrap();
        let targets = vec![DVector::from_vec(vec![1.0, 0.0]); 30];
        let w = CostWeights {
            q: vec![DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 2.0]); 30],
            r: DMatrix::identity(1, 1) * 3.0,
        };
        let scaled = CostWeights {
            q: w.q.iter().map(|q| q * 7.5).collect(),
            r: &w.r * 7.5,
        };
        let a = riccati_backward(&sys, &targets, &w).unwrap();
        let b = riccati_backward(&sys, &targets, &scaled).unwrap();
        for t in 0..30 {
            assert!((&a.k[t] - &b.k[t]).amax() < 1e-9);
            assert!((&a.uff[t] - &b.uff[t]).amax() < 1e-9);
        }
    }

    #[test]
    fn riccati_matrices_are_psd() {
        let sys = double_integrator(2, 0.02).unwrap();
        let targets = vec![DVector::zeros(4); 200];
        let w = CostWeights {
            q: vec![DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0, 0.0, 0.0])); 200],
            r: DMatrix::identity(2, 2) * 9.0,
        };
        let g = riccati_backward(&sys, &targets, &w).unwrap();
        for p in &g.p {
            assert!((p - p.transpose()).amax() == 0.0);
            let min = nalgebra::SymmetricEigen::new(p.clone()).eigenvalues.min();
            assert!(min > -1e-9 * p.amax().max(1.0));
        }
        let (kp, kv) = g.stiffness_damping(0);
        assert_eq!((kp.shape(), kv.shape()), ((2, 2), (2, 2)));
    }
}
