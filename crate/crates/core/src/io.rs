//! Dataset and model files (versioned JSON) plus plain-text tables.
//!
//! Floats are written in their shortest round-trip form and parsed exactly,
//! so a save/load cycle reproduces every numeric field bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};
use crate::gaussian::{AffineFrame, Gaussian};
use crate::latent::{CovarianceStructure, LatentParams, MfaParams, SemiTiedParams};
use crate::markov::{DurationModel, HsmmModel};
use crate::task_params::FrameSet;

pub const FORMAT_VERSION: &str = "v1";

/// Metadata keys written by the generators.
pub const META_SPLIT: &str = "split";
pub const META_DT: &str = "dt";
pub const META_POSITION_DIMS: &str = "position_dims";

/// One demonstration: `T x D` observations and the frames it was recorded in.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub points: DMatrix<f64>,
    pub frames: FrameSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub n_frames: usize,
    pub demos: Vec<Demonstration>,
    pub metadata: BTreeMap<String, String>,
}

impl Dataset {
    /// Check shared dimension and frame count, finiteness and non-empty demos.
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.n_frames == 0 {
            return input("dataset dimension and frame count must be at least 1");
        }
        if self.demos.is_empty() {
            return input("dataset has no demonstrations");
        }
        for (m, demo) in self.demos.iter().enumerate() {
            if demo.points.nrows() == 0 {
                return input(format!("demo {m}: no points"));
            }
            if demo.points.ncols() != self.dim {
                return input(format!("demo {m}: points have dimension {} instead of {}", demo.points.ncols(), self.dim));
            }
            if demo.frames.len() != self.n_frames {
                return input(format!("demo {m}: {} frames instead of {}", demo.frames.len(), self.n_frames));
            }
            if demo.frames.dim() != self.dim {
                return input(format!("demo {m}: frames have dimension {}", demo.frames.dim()));
            }
            if !demo.points.iter().all(|v| v.is_finite()) {
                return input(format!("demo {m}: non-finite point"));
            }
        }
        Ok(())
    }

    pub fn points(&self) -> Vec<DMatrix<f64>> {
        self.demos.iter().map(|d| d.points.clone()).collect()
    }

    pub fn frame_sets(&self) -> Vec<FrameSet> {
        self.demos.iter().map(|d| d.frames.clone()).collect()
    }

    /// Per-demo split labels, if the metadata carries them.
    pub fn split_labels(&self) -> Option<Vec<String>> {
        self.metadata
            .get(META_SPLIT)
            .map(|s| s.split(',').map(|l| l.trim().to_string()).collect())
    }

    /// Indices of demos labelled `split`; `"all"` selects every demo.
    pub fn split_indices(&self, split: &str) -> Result<Vec<usize>> {
        if split == "all" {
            return Ok((0..self.demos.len()).collect());
        }
        let labels = self
            .split_labels()
            .ok_or_else(|| Error::Input("dataset has no split labels".into()))?;
        if labels.len() != self.demos.len() {
            return input(format!("{} split labels for {} demos", labels.len(), self.demos.len()));
        }
        let idx: Vec<usize> = labels.iter().enumerate().filter(|(_, l)| *l == split).map(|(i, _)| i).collect();
        if idx.is_empty() {
            return input(format!("split '{split}' selects no demonstrations"));
        }
        Ok(idx)
    }

    /// Keep only the demos at `indices`, relabelling the split metadata.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let labels = self.split_labels();
        let mut out = self.clone();
        out.demos = indices
            .iter()
            .map(|&i| self.demos.get(i).cloned().ok_or_else(|| Error::Input(format!("demo index {i} out of range"))))
            .collect::<Result<_>>()?;
        if let Some(labels) = labels.filter(|l| l.len() == self.demos.len()) {
            let kept: Vec<&str> = indices.iter().map(|&i| labels[i].as_str()).collect();
            out.metadata.insert(META_SPLIT.into(), kept.join(","));
        }
        Ok(out)
    }

    pub fn dt(&self) -> Option<f64> {
        self.metadata.get(META_DT).and_then(|v| v.parse().ok())
    }

    pub fn position_dims(&self) -> Option<usize> {
        self.metadata.get(META_POSITION_DIMS).and_then(|v| v.parse().ok())
    }
}

#[derive(Deserialize)]
struct VersionProbe {
    version: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetRaw {
    version: String,
    dim: usize,
    frames: usize,
    demos: Vec<DemoRaw>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DemoRaw {
    points: Vec<Vec<f64>>,
    frames: Vec<FrameRaw>,
}

/// `a` is the row-major flattened `D x D` matrix.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameRaw {
    a: Vec<f64>,
    b: Vec<f64>,
}

fn parse_err(context: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        context: context.to_string(),
        message: message.into(),
    }
}

fn check_version(text: &str, context: &str) -> Result<()> {
    let probe: VersionProbe = serde_json::from_str(text).map_err(|e| parse_err(context, e.to_string()))?;
    if probe.version != FORMAT_VERSION {
        return Err(parse_err(
            context,
            format!("unsupported format version '{}' (expected '{FORMAT_VERSION}')", probe.version),
        ));
    }
    Ok(())
}

fn rows_to_matrix(rows: &[Vec<f64>], cols: usize, what: &str) -> std::result::Result<DMatrix<f64>, String> {
    if let Some(t) = rows.iter().position(|r| r.len() != cols) {
        return Err(format!("{what} row {t} has {} values, expected {cols}", rows[t].len()));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn dataset_from_raw(raw: DatasetRaw) -> std::result::Result<Dataset, String> {
    let d = raw.dim;
    let mut demos = Vec::with_capacity(raw.demos.len());
    for (m, demo) in raw.demos.into_iter().enumerate() {
        if demo.frames.len() != raw.frames {
            return Err(format!("demo {m} has {} frames but the file declares {}", demo.frames.len(), raw.frames));
        }
        let points = rows_to_matrix(&demo.points, d, &format!("demo {m} points")).map_err(|e| e.to_string())?;
        let frames = demo
            .frames
            .into_iter()
            .enumerate()
            .map(|(j, f)| {
                if f.a.len() != d * d || f.b.len() != d {
                    return Err(format!("demo {m} frame {j} has the wrong size"));
                }
                AffineFrame::new(DMatrix::from_row_slice(d, d, &f.a), DVector::from_vec(f.b))
                    .map_err(|e| format!("demo {m} frame {j}: {e}"))
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let frames = FrameSet::new(frames).map_err(|e| format!("demo {m}: {e}"))?;
        demos.push(Demonstration { points, frames });
    }
    let ds = Dataset {
        dim: d,
        n_frames: raw.frames,
        demos,
        metadata: raw.metadata,
    };
    ds.validate().map_err(|e| e.to_string())?;
    Ok(ds)
}

pub fn dataset_from_str(text: &str, context: &str) -> Result<Dataset> {
    check_version(text, context)?;
    let raw: DatasetRaw = serde_json::from_str(text).map_err(|e| parse_err(context, e.to_string()))?;
    dataset_from_raw(raw).map_err(|m| parse_err(context, m))
}

pub fn dataset_to_string(ds: &Dataset) -> Result<String> {
    ds.validate()?;
    let raw = DatasetRaw {
        version: FORMAT_VERSION.into(),
        dim: ds.dim,
        frames: ds.n_frames,
        demos: ds
            .demos
            .iter()
            .map(|demo| DemoRaw {
                points: matrix_to_rows(&demo.points),
                frames: demo
                    .frames
                    .frames()
                    .iter()
                    .map(|f| FrameRaw {
                        a: f.a().transpose().as_slice().to_vec(),
                        b: f.b().as_slice().to_vec(),
                    })
                    .collect(),
            })
            .collect(),
        metadata: ds.metadata.clone(),
    };
    serde_json::to_string_pretty(&raw).map_err(|e| Error::Input(e.to_string()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Write through a temporary sibling file so readers never see a partial file.
fn write_text(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("tmp~");
    let wrap = |e: std::io::Error| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())));
    fs::write(&tmp, text).map_err(wrap)?;
    fs::rename(&tmp, path).map_err(wrap)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    dataset_from_str(&read_text(path)?, &path.display().to_string())
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    write_text(path, &dataset_to_string(ds)?)
}

// ---------------------------------------------------------------------------
// Models

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelRaw {
    version: String,
    states: usize,
    frames: usize,
    dim: usize,
    priors: Vec<f64>,
    transitions: Vec<Vec<f64>>,
    emissions: Vec<Vec<Gaussian>>,
    durations: Vec<DurationRaw>,
    s_max: usize,
    structure: CovarianceStructure,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mfa: Option<MfaRaw>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    semitied: Option<SemiTiedRaw>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DurationRaw {
    mean: f64,
    var: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MfaRaw {
    latent_dim: usize,
    isotropic: bool,
    /// `[state][frame]` loadings, each as `D` rows of `d` values.
    loadings: Vec<Vec<Vec<Vec<f64>>>>,
    noise: Vec<Vec<Vec<f64>>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SemiTiedRaw {
    bases: Vec<Vec<Vec<f64>>>,
    diagonals: Vec<Vec<Vec<f64>>>,
}

fn model_to_raw(model: &HsmmModel) -> ModelRaw {
    let (mfa, semitied) = match &model.latent {
        Some(LatentParams::Mfa(p)) => (
            Some(MfaRaw {
                latent_dim: p.latent_dim,
                isotropic: p.isotropic,
                loadings: p.loadings.iter().map(|r| r.iter().map(matrix_to_rows).collect()).collect(),
                noise: p.noise.iter().map(|r| r.iter().map(|v| v.as_slice().to_vec()).collect()).collect(),
            }),
            None,
        ),
        Some(LatentParams::SemiTied(p)) => (
            None,
            Some(SemiTiedRaw {
                bases: p.bases.iter().map(matrix_to_rows).collect(),
                diagonals: p.diagonals.iter().map(|r| r.iter().map(|v| v.as_slice().to_vec()).collect()).collect(),
            }),
        ),
        None => (None, None),
    };
    ModelRaw {
        version: FORMAT_VERSION.into(),
        states: model.n_states(),
        frames: model.n_frames(),
        dim: model.dim(),
        priors: model.priors.as_slice().to_vec(),
        transitions: matrix_to_rows(&model.transitions),
        emissions: model.emissions.clone(),
        durations: model.durations.iter().map(|d| DurationRaw { mean: d.mean, var: d.var }).collect(),
        s_max: model.s_max,
        structure: model.structure,
        mfa,
        semitied,
    }
}

fn model_from_raw(raw: ModelRaw) -> std::result::Result<HsmmModel, String> {
    let k = raw.states;
    let d = raw.dim;
    if raw.priors.len() != k || raw.transitions.len() != k || raw.emissions.len() != k || raw.durations.len() != k {
        return Err(format!("model declares {k} states but its arrays disagree"));
    }
    let transitions = rows_to_matrix(&raw.transitions, k, "transitions")?;
    for (i, row) in raw.emissions.iter().enumerate() {
        if row.len() != raw.frames {
            return Err(format!("state {i} has {} emission frames, expected {}", row.len(), raw.frames));
        }
        if row.iter().any(|g| g.dim() != d) {
            return Err(format!("state {i} has an emission of the wrong dimension"));
        }
    }
    let vecs = |rows: Vec<Vec<Vec<f64>>>| -> Vec<Vec<DVector<f64>>> {
        rows.into_iter().map(|r| r.into_iter().map(DVector::from_vec).collect()).collect()
    };
    let latent = match (raw.mfa, raw.semitied) {
        (Some(m), None) => {
            let loadings = m
                .loadings
                .iter()
                .map(|r| r.iter().map(|l| rows_to_matrix(l, m.latent_dim, "loading")).collect())
                .collect::<std::result::Result<Vec<Vec<_>>, _>>()?;
            Some(LatentParams::Mfa(MfaParams {
                latent_dim: m.latent_dim,
                isotropic: m.isotropic,
                loadings,
                noise: vecs(m.noise),
            }))
        }
        (None, Some(s)) => {
            let bases = s
                .bases
                .iter()
                .map(|b| rows_to_matrix(b, d, "basis"))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            Some(LatentParams::SemiTied(SemiTiedParams {
                bases,
                diagonals: vecs(s.diagonals),
            }))
        }
        (None, None) => None,
        (Some(_), Some(_)) => return Err("model carries both factor and semi-tied parameters".into()),
    };
    let model = HsmmModel {
        priors: DVector::from_vec(raw.priors),
        transitions,
        emissions: raw.emissions,
        durations: raw.durations.into_iter().map(|d| DurationModel { mean: d.mean, var: d.var }).collect(),
        s_max: raw.s_max,
        structure: raw.structure,
        latent,
    };
    model.validate().map_err(|e| e.to_string())?;
    Ok(model)
}

pub fn model_from_str(text: &str, context: &str) -> Result<HsmmModel> {
    check_version(text, context)?;
    let raw: ModelRaw = serde_json::from_str(text).map_err(|e| parse_err(context, e.to_string()))?;
    model_from_raw(raw).map_err(|m| parse_err(context, m))
}

pub fn model_to_string(model: &HsmmModel) -> Result<String> {
    model.validate()?;
    serde_json::to_string_pretty(&model_to_raw(model)).map_err(|e| Error::Input(e.to_string()))
}

pub fn load_model(path: &Path) -> Result<HsmmModel> {
    model_from_str(&read_text(path)?, &path.display().to_string())
}

pub fn save_model(path: &Path, model: &HsmmModel) -> Result<()> {
    write_text(path, &model_to_string(model)?)
}

// ---------------------------------------------------------------------------
// Frame sets and plain-text tables

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameSetRaw {
    version: String,
    frames: Vec<FrameRaw>,
}

/// Frame set file: `{"version": "v1", "frames": [{"a": [...], "b": [...]}]}`.
pub fn frames_from_str(text: &str, context: &str) -> Result<FrameSet> {
    check_version(text, context)?;
    let raw: FrameSetRaw = serde_json::from_str(text).map_err(|e| parse_err(context, e.to_string()))?;
    let frames = raw
        .frames
        .into_iter()
        .enumerate()
        .map(|(j, f)| {
            let d = f.b.len();
            if f.a.len() != d * d {
                return Err(parse_err(context, format!("frame {j}: matrix size does not match offset")));
            }
            AffineFrame::new(DMatrix::from_row_slice(d, d, &f.a), DVector::from_vec(f.b))
                .map_err(|e| parse_err(context, format!("frame {j}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    FrameSet::new(frames).map_err(|e| parse_err(context, e.to_string()))
}

pub fn frames_to_string(frames: &FrameSet) -> Result<String> {
    let raw = FrameSetRaw {
        version: FORMAT_VERSION.into(),
        frames: frames
            .frames()
            .iter()
            .map(|f| FrameRaw {
                a: f.a().transpose().as_slice().to_vec(),
                b: f.b().as_slice().to_vec(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&raw).map_err(|e| Error::Input(e.to_string()))
}

pub fn load_frames(path: &Path) -> Result<FrameSet> {
    frames_from_str(&read_text(path)?, &path.display().to_string())
}

/// Comma-separated table with a header line.
pub fn write_table(out: &mut dyn Write, header: &[String], rows: &DMatrix<f64>) -> Result<()> {
    writeln!(out, "{}", header.join(","))?;
    for i in 0..rows.nrows() {
        let line: Vec<String> = rows.row(i).iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

pub fn save_table(path: &Path, header: &[String], rows: &DMatrix<f64>) -> Result<()> {
    let mut buf = Vec::new();
    write_table(&mut buf, header, rows)?;
    write_text(path, &String::from_utf8(buf).expect("ascii table"))
}

/// Vectors separated by whitespace or commas, one per line; a blank line
/// ends the current sequence. Lines starting with `#` are ignored.
pub fn read_vector_lines(reader: impl BufRead, context: &str) -> Result<Vec<DMatrix<f64>>> {
    let mut sequences = Vec::new();
    let mut current: Vec<Vec<f64>> = Vec::new();
    let mut dim = None;
    let flush = |current: &mut Vec<Vec<f64>>, sequences: &mut Vec<DMatrix<f64>>, d: usize| {
        if !current.is_empty() {
            sequences.push(DMatrix::from_fn(current.len(), d, |i, j| current[i][j]));
            current.clear();
        }
    };
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.starts_with('#') {
            continue;
        }
        if trimmed.is_empty() {
            if let Some(d) = dim {
                flush(&mut current, &mut sequences, d);
            }
            continue;
        }
        let values = trimmed
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|e| parse_err(context, format!("line {}: '{s}': {e}", n + 1))))
            .collect::<Result<Vec<f64>>>()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(context, format!("line {}: non-finite value", n + 1)));
        }
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(parse_err(context, format!("line {}: expected {d} values, found {}", n + 1, values.len())))
            }
            _ => {}
        }
        current.push(values);
    }
    if let Some(d) = dim {
        flush(&mut current, &mut sequences, d);
    }
    if sequences.is_empty() {
        return Err(parse_err(context, "no vectors found"));
    }
    Ok(sequences)
}
