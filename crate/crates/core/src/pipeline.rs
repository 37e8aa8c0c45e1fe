//! End-to-end flows: training on a dataset, generating a tracked trajectory
//! for a frame configuration, and evaluating against demonstrations.

use nalgebra::{DMatrix, DVector};

use crate::error::{input, Result};
use crate::io::Dataset;
use crate::lqt::{double_integrator, rollout, track_reference, LinearSystem, Rollout, TrackerGains, DEFAULT_CONTROL_WEIGHT};
use crate::markov::{decode_reference, sample_states_stochastic, EmConfig, Fit, HsmmModel, ReferenceTrajectory};
use crate::metrics::{mse, MseSummary};
use crate::synth::DEFAULT_DT;
use crate::task_params::{adapt, tp_em_fit, FrameSet};

/// Train on every demo of `ds` (in its own frames).
pub fn train(ds: &Dataset, states: usize, config: &EmConfig) -> Result<Fit> {
    ds.validate()?;
    tp_em_fit(&ds.points(), &ds.frame_sets(), states, config)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateOptions {
    pub horizon: usize,
    pub r_scalar: f64,
    pub dt: f64,
    /// Number of position coordinates; the observation is either positions
    /// only or positions followed by velocities. `None` means positions only.
    pub position_dims: Option<usize>,
    /// Sample the state sequence with this seed instead of decoding the most
    /// probable one.
    pub stochastic_seed: Option<u64>,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            horizon: 100,
            r_scalar: DEFAULT_CONTROL_WEIGHT,
            dt: DEFAULT_DT,
            position_dims: None,
            stochastic_seed: None,
        }
    }
}

impl GenerateOptions {
    /// Options matching a dataset's metadata.
    pub fn for_dataset(ds: &Dataset, horizon: usize) -> Self {
        Self {
            horizon,
            dt: ds.dt().unwrap_or(DEFAULT_DT),
            position_dims: ds.position_dims(),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct Generated {
    /// Single-frame model the reference was decoded from.
    pub model: HsmmModel,
    pub reference: ReferenceTrajectory,
    pub system: LinearSystem,
    pub targets: Vec<DVector<f64>>,
    pub gains: TrackerGains,
    pub rollout: Rollout,
    pub position_dims: usize,
}

impl Generated {
    /// Position block of the rolled-out states (`T x m`).
    pub fn positions(&self) -> DMatrix<f64> {
        self.rollout.states.columns(0, self.position_dims).into_owned()
    }
}

fn split_dims(dim: usize, position_dims: Option<usize>) -> Result<usize> {
    let p = position_dims.unwrap_or(dim);
    if p == 0 || (dim != p && dim != 2 * p) {
        return input(format!(
            "observation dimension {dim} must equal the position dimension {p} or twice it"
        ));
    }
    Ok(p)
}

/// Adapt (when frames are given), decode a reference from `initial` and
/// track it with the linear quadratic controller.
pub fn generate(model: &HsmmModel, frames: Option<&FrameSet>, initial: &DVector<f64>, opts: &GenerateOptions) -> Result<Generated> {
    let single = match frames {
        Some(f) => adapt(model, f)?.model,
        None if model.n_frames() == 1 => model.clone(),
        None => return input("a task-parameterized model needs a frame set to generate"),
    };
    let dim = single.dim();
    if initial.len() != dim {
        return input(format!("initial state has dimension {} but the model has {dim}", initial.len()));
    }
    let p = split_dims(dim, opts.position_dims)?;
    let reference = match opts.stochastic_seed {
        Some(seed) => {
            let states = sample_states_stochastic(&single, opts.horizon, seed)?;
            ReferenceTrajectory::from_states(&single, &states)?
        }
        None => decode_reference(&single, initial, opts.horizon)?,
    };
    let system = double_integrator(p, opts.dt)?;
    let (targets, gains) = track_reference(&system, &reference, opts.r_scalar)?;
    let mut x0 = DVector::zeros(2 * p);
    x0.rows_mut(0, dim).copy_from(initial);
    let rollout = rollout(&system, &gains, &targets, &x0)?;
    Ok(Generated {
        model: single,
        reference,
        system,
        targets,
        gains,
        rollout,
        position_dims: p,
    })
}

/// Reproduce every selected demonstration from its first point in its own
/// frames and compare positions.
pub fn evaluate(model: &HsmmModel, ds: &Dataset, indices: &[usize], opts: &GenerateOptions) -> Result<MseSummary> {
    if indices.is_empty() {
        return input("no demonstrations selected for evaluation");
    }
    let p = split_dims(ds.dim, opts.position_dims)?;
    let dims: Vec<usize> = (0..p).collect();
    let errors = indices
        .iter()
        .map(|&i| {
            let demo = ds
                .demos
                .get(i)
                .ok_or_else(|| crate::Error::Input(format!("demo index {i} out of range")))?;
            let o = GenerateOptions {
                horizon: demo.points.nrows(),
                ..opts.clone()
            };
            let out = generate(model, Some(&demo.frames), &demo.points.row(0).transpose(), &o)?;
            mse(&out.positions(), &demo.points.columns(0, p).into_owned(), &dims)
        })
        .collect::<Result<Vec<_>>>()?;
    MseSummary::from_values(errors)
}
