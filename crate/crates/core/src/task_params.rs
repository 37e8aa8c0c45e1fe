//! Task-parameterized models: demonstrations seen from several coordinate
//! frames, and adaptation of a trained model to new frame configurations.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{input, Result};
use crate::gaussian::{product_of_gaussians, transform, AffineFrame, Gaussian};
use crate::latent::CovarianceStructure;
use crate::linalg::rows_of;
use crate::markov::{fit_sequences, EmConfig, Fit, FrameRows, HsmmModel};

/// Ordered list of coordinate frames of one situation.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSet {
    frames: Vec<AffineFrame>,
}

impl FrameSet {
    pub fn new(frames: Vec<AffineFrame>) -> Result<Self> {
        let Some(first) = frames.first() else {
            return input("a frame set needs at least one frame");
        };
        let d = first.dim();
        if frames.iter().any(|f| f.dim() != d) {
            return input("all frames of a frame set must share one dimension");
        }
        Ok(Self { frames })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            frames: vec![AffineFrame::identity(dim)],
        }
    }

    pub fn frames(&self) -> &[AffineFrame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.frames[0].dim()
    }
}

/// Observations of one demonstration (`T x D`) expressed in every frame.
pub fn project_demo(demo: &DMatrix<f64>, frames: &FrameSet) -> Result<Vec<DMatrix<f64>>> {
    if demo.ncols() != frames.dim() {
        return input(format!(
            "demonstration has dimension {} but frames have dimension {}",
            demo.ncols(),
            frames.dim()
        ));
    }
    frames
        .frames()
        .iter()
        .map(|f| {
            let mut out = DMatrix::zeros(demo.nrows(), demo.ncols());
            for t in 0..demo.nrows() {
                out.set_row(t, &f.to_local(&demo.row(t).transpose())?.transpose());
            }
            Ok(out)
        })
        .collect()
}

fn project_rows(demo: &DMatrix<f64>, frames: &FrameSet) -> Result<FrameRows> {
    if demo.ncols() != frames.dim() {
        return input(format!(
            "demonstration has dimension {} but frames have dimension {}",
            demo.ncols(),
            frames.dim()
        ));
    }
    let rows = rows_of(demo);
    frames
        .frames()
        .iter()
        .map(|f| rows.iter().map(|x| f.to_local(x)).collect())
        .collect()
}

/// EM over demonstrations observed in their own frame sets; the emission of
/// a state is the product of its per-frame densities.
pub fn tp_em_fit(demos: &[DMatrix<f64>], frames: &[FrameSet], states: usize, config: &EmConfig) -> Result<Fit> {
    if demos.len() != frames.len() {
        return input(format!(
            "{} demonstrations but {} frame sets were given",
            demos.len(),
            frames.len()
        ));
    }
    if let Some(first) = frames.first() {
        if let Some(m) = frames.iter().position(|f| f.len() != first.len()) {
            return input(format!(
                "demonstration {m} has {} frames but demonstration 0 has {}",
                frames[m].len(),
                first.len()
            ));
        }
    }
    let seqs: Vec<FrameRows> = demos
        .iter()
        .zip(frames)
        .enumerate()
        .map(|(m, (d, f))| {
            project_rows(d, f).map_err(|e| match e {
                crate::Error::Input(msg) => crate::Error::Input(format!("demonstration {m}: {msg}")),
                other => other,
            })
        })
        .collect::<Result<_>>()?;
    fit_sequences(&seqs, states, config)
}

/// Single-frame model obtained by adapting a task-parameterized model to a
/// new frame set.
#[derive(Debug, Clone)]
pub struct AdaptedModel {
    pub model: HsmmModel,
    pub frames: FrameSet,
}

/// Global Gaussian of every state: the product of its per-frame Gaussians
/// mapped through the new frames. Priors, transitions and durations are
/// copied unchanged.
pub fn adapt(model: &HsmmModel, new_frames: &FrameSet) -> Result<AdaptedModel> {
    if model.n_frames() != new_frames.len() {
        return input(format!(
            "model has {} frames but {} were supplied",
            model.n_frames(),
            new_frames.len()
        ));
    }
    if model.dim() != new_frames.dim() {
        return input(format!(
            "model has dimension {} but frames have dimension {}",
            model.dim(),
            new_frames.dim()
        ));
    }
    let emissions: Vec<Vec<Gaussian>> = model
        .emissions
        .par_iter()
        .map(|per_frame| {
            let mapped: Vec<Gaussian> = per_frame
                .iter()
                .zip(new_frames.frames())
                .map(|(g, f)| transform(g, f))
                .collect::<Result<_>>()?;
            Ok(vec![product_of_gaussians(&mapped)?])
        })
        .collect::<Result<_>>()?;
    Ok(AdaptedModel {
        model: HsmmModel {
            priors: model.priors.clone(),
            transitions: model.transitions.clone(),
            emissions,
            durations: model.durations.clone(),
            s_max: model.s_max,
            structure: CovarianceStructure::Full,
            latent: None,
        },
        frames: new_frames.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::spd_inverse;
    use crate::markov::{em_fit, DurationModel};
    use nalgebra::DVector;

    fn rot(theta: f64) -> DMatrix<f64> {
        let (s, c) = theta.sin_cos();
        DMatrix::from_row_slice(2, 2, &[c, -s, s, c])
    }

    #[test]
    fn projections() {
        let demo = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 2.0, 3.0]);
        let id = project_demo(&demo, &FrameSet::identity(2)).unwrap();
        assert_eq!(id[0], demo);

        let shift = FrameSet::new(vec![AffineFrame::translation(DVector::from_vec(vec![1.0, 0.0]))]).unwrap();
        let p = project_demo(&demo, &shift).unwrap();
        assert_eq!(p[0], DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 3.0]));

        let r = FrameSet::new(vec![AffineFrame::new(rot(std::f64::consts::FRAC_PI_2), DVector::zeros(2)).unwrap()]).unwrap();
        let p = project_demo(&DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), &r).unwrap();
        // inverse of a rotation is its transpose
        let oracle = rot(std::f64::consts::FRAC_PI_2).transpose() * DVector::from_vec(vec![1.0, 0.0]);
        assert!((p[0][(0, 0)] - oracle[0]).abs() < 1e-12 && (p[0][(0, 1)] - oracle[1]).abs() < 1e-12);
        assert!((p[0][(0, 1)] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn singular_frame_rejected() {
        assert!(AffineFrame::new(DMatrix::zeros(2, 2), DVector::zeros(2)).is_err());
    }

    fn demos() -> Vec<DMatrix<f64>> {
        (0..3)
            .map(|m| {
                DMatrix::from_fn(30, 2, |t, d| {
                    let base = if t < 15 { 0.0 } else { 2.0 };
                    base + d as f64 + 0.05 * ((t * 7 + m * 3 + d * 5) % 11) as f64
                })
            })
            .collect()
    }

    #[test]
    fn single_identity_frame_matches_plain_em() {
        let d = demos();
        let cfg = EmConfig::default();
        let plain = em_fit(&d, 2, &cfg).unwrap();
        let frames = vec![FrameSet::identity(2); d.len()];
        let tp = tp_em_fit(&d, &frames, 2, &cfg).unwrap();
        assert_eq!(plain.model, tp.model);
        assert_eq!(plain.log_likelihoods, tp.log_likelihoods);
    }

    #[test]
    fn inconsistent_frame_counts_rejected() {
        let d = demos();
        let two = FrameSet::new(vec![AffineFrame::identity(2), AffineFrame::identity(2)]).unwrap();
        let frames = vec![FrameSet::identity(2), two.clone(), two];
        assert!(matches!(tp_em_fit(&d, &frames, 2, &EmConfig::default()), Err(crate::Error::Input(_))));
    }

    fn two_frame_model() -> HsmmModel {
        let g1 = Gaussian::new(DVector::from_vec(vec![1.0, 0.0]), DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3])).unwrap();
        let g2 = Gaussian::new(DVector::from_vec(vec![0.0, -1.0]), DMatrix::from_row_slice(2, 2, &[0.2, 0.0, 0.0, 0.8])).unwrap();
        HsmmModel {
            priors: DVector::from_vec(vec![1.0]),
            transitions: DMatrix::from_element(1, 1, 1.0),
            emissions: vec![vec![g1, g2]],
            durations: vec![DurationModel { mean: 4.0, var: 1.0 }],
            s_max: 10,
            structure: CovarianceStructure::Full,
            latent: None,
        }
    }

    #[test]
    fn adapt_identity_and_translation() {
        let mut model = two_frame_model();
        model.emissions[0].truncate(1);
        let a = adapt(&model, &FrameSet::identity(2)).unwrap();
        assert_eq!(a.model.emissions, model.emissions);
        let shift = DVector::from_vec(vec![0.5, -2.0]);
        let a = adapt(&model, &FrameSet::new(vec![AffineFrame::translation(shift.clone())]).unwrap()).unwrap();
        let g = a.model.emission(0);
        assert!((g.mean() - (model.emission(0).mean() + &shift)).amax() < 1e-15);
        assert_eq!(g.cov(), model.emission(0).cov());
        assert_eq!(a.model.transitions, model.transitions);
        assert_eq!(a.model.durations, model.durations);
    }

    #[test]
    fn adapt_two_frames_matches_grid_product() {
        let model = two_frame_model();
        let frames = FrameSet::new(vec![
            AffineFrame::identity(2),
            AffineFrame::new(rot(0.7), DVector::from_vec(vec![0.3, 0.4])).unwrap(),
        ])
        .unwrap();
        let adapted = adapt(&model, &frames).unwrap();
        let g = adapted.model.emission(0);

        // numeric moments of the pointwise density product on a grid
        let f1 = transform(&model.emissions[0][0], &frames.frames()[0]).unwrap();
        let f2 = transform(&model.emissions[0][1], &frames.frames()[1]).unwrap();
        let (n, lo, hi) = (601, -4.0, 4.0);
        let h = (hi - lo) / (n - 1) as f64;
        let (mut z, mut m1, mut m2) = (0.0, DVector::zeros(2), DMatrix::zeros(2, 2));
        for i in 0..n {
            for j in 0..n {
                let x = DVector::from_vec(vec![lo + i as f64 * h, lo + j as f64 * h]);
                let w = (f1.log_density(&x).unwrap() + f2.log_density(&x).unwrap()).exp();
                z += w;
                m1 += &x * w;
                m2 += &x * x.transpose() * w;
            }
        }
        let mean = m1 / z;
        let cov = m2 / z - &mean * mean.transpose();
        assert!((g.mean() - &mean).amax() < 1e-6, "{} vs {}", g.mean(), mean);
        assert!((g.cov() - &cov).amax() < 1e-6);

        let p = spd_inverse(g.cov()).unwrap();
        let sum = spd_inverse(f1.cov()).unwrap() + spd_inverse(f2.cov()).unwrap();
        assert!((p - sum).amax() < 1e-9);
    }

    #[test]
    fn adapt_dimension_mismatch() {
        let model = two_frame_model();
        assert!(adapt(&model, &FrameSet::identity(2)).is_err());
        let f3 = FrameSet::new(vec![AffineFrame::identity(3), AffineFrame::identity(3)]).unwrap();
        assert!(adapt(&model, &f3).is_err());
    }

    #[test]
    fn adapt_is_rigidly_equivariant() {
        let model = two_frame_model();
        let frames = FrameSet::new(vec![
            AffineFrame::new(rot(0.2), DVector::from_vec(vec![1.0, 0.0])).unwrap(),
            AffineFrame::new(rot(-0.9), DVector::from_vec(vec![0.0, 2.0])).unwrap(),
        ])
        .unwrap();
        let outer = AffineFrame::new(rot(1.1), DVector::from_vec(vec![-0.5, 0.7])).unwrap();
        let moved = FrameSet::new(
            frames
                .frames()
                .iter()
                .map(|f| AffineFrame::new(outer.a() * f.a(), outer.a() * f.b() + outer.b()).unwrap())
                .collect(),
        )
        .unwrap();
        let base = adapt(&model, &frames).unwrap();
        let moved = adapt(&model, &moved).unwrap();
        let expected = transform(base.model.emission(0), &outer).unwrap();
        assert!((moved.model.emission(0).mean() - expected.mean()).amax() < 1e-10);
        assert!((moved.model.emission(0).cov() - expected.cov()).amax() < 1e-10);
    }
}
