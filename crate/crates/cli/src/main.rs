//! `imitate`: train, adapt, generate and evaluate task-parameterized HSMMs
//! from the command line.

mod config;

use std::fmt::Write as _;
use std::io::{BufReader, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use imitate_core::bnp_sva::{calibrate_bandwidth, sva_fit, sva_to_hsmm, SvaHyper};
use imitate_core::io::{
    load_dataset, load_frames, load_model, read_vector_lines, save_dataset, save_model, save_table, write_table, Dataset,
};
use imitate_core::latent::{count_parameters, ParameterLayout};
use imitate_core::linalg::rows_of;
use imitate_core::markov::{viterbi, HsmmModel};
use imitate_core::pipeline::{evaluate, generate, train, GenerateOptions};
use imitate_core::synth::{gen_pickplace, gen_zshape};
use imitate_core::task_params::{adapt, project_demo, FrameSet};
use nalgebra::{DMatrix, DVector};

use config::{parse_structure, RunConfig};

/// Error with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    pub fn input(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<imitate_core::Error> for Failure {
    fn from(e: imitate_core::Error) -> Self {
        let code = match e {
            imitate_core::Error::Numeric(_) => 3,
            _ => 2,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::input(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, Failure>;

#[derive(Parser)]
#[command(name = "imitate", version, about = "Learn, adapt and reproduce demonstrated motions")]
struct Cli {
    /// JSON run configuration; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Random seed (default from IMITATE_SEED, else 0).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to a dataset.
    Train(TrainArgs),
    /// Adapt a task-parameterized model to a new frame configuration.
    Adapt(AdaptArgs),
    /// Decode a reference and track it from an initial state.
    Generate(GenerateArgs),
    /// Reproduce demonstrations and report position MSE per split.
    Eval(EvalArgs),
    /// Dump the most likely state sequence of every demonstration.
    Segment(SegmentArgs),
    /// Cluster an observation stream without fixing the number of states.
    Cluster(ClusterArgs),
    /// Count free model parameters.
    CountParams(CountArgs),
    /// Write a synthetic dataset.
    Demo(DemoArgs),
}

#[derive(Args)]
struct ModelFlags {
    /// Number of states.
    #[arg(long)]
    states: Option<usize>,
    /// Covariance structure: full, mfa, mppca or semitied.
    #[arg(long)]
    structure: Option<String>,
    /// Latent dimension of mfa/mppca.
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Longest duration considered (steps).
    #[arg(long)]
    s_max: Option<usize>,
    /// Pseudo-count added to every transition count.
    #[arg(long)]
    transition_smoothing: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset file.
    #[arg(long)]
    data: PathBuf,
    /// Where to write the model.
    #[arg(long)]
    out: PathBuf,
    /// Train only on demos with this split label.
    #[arg(long, default_value = "all")]
    split: String,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    model: PathBuf,
    /// Frame set file.
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ControlFlags {
    /// Control weight r (R = r I).
    #[arg(long)]
    r_scalar: Option<f64>,
    /// Time step; defaults to the dataset value or one step.
    #[arg(long)]
    dt: Option<f64>,
    /// Number of position coordinates in an observation.
    #[arg(long)]
    position_dims: Option<usize>,
    /// Sample the state sequence with this seed instead of decoding it.
    #[arg(long)]
    stochastic_seed: Option<u64>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Frame set file for a task-parameterized model.
    #[arg(long)]
    frames: Option<PathBuf>,
    /// Initial position, comma separated.
    #[arg(long, allow_hyphen_values = true)]
    initial: Option<String>,
    /// Take the initial state (and frames, if not given) from this dataset.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Demo index within `--data`.
    #[arg(long, default_value_t = 0)]
    demo: usize,
    #[arg(long)]
    horizon: Option<usize>,
    /// Trajectory table (CSV); printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-step reference table (CSV).
    #[arg(long)]
    reference: Option<PathBuf>,
    #[command(flatten)]
    control: ControlFlags,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Rows,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Split labels to evaluate (repeatable); defaults to every label.
    #[arg(long)]
    split: Vec<String>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
    #[command(flatten)]
    control: ControlFlags,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output table (CSV); printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ClusterArgs {
    /// Dataset file; observations are read from stdin when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Write the clustering as a single-frame model.
    #[arg(long)]
    model_out: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    lambda3: Option<f64>,
    /// Subspace bandwidth; calibrated from the stream when omitted.
    #[arg(long)]
    bandwidth: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    max_sweeps: Option<usize>,
    /// Number of leading observations used to calibrate the bandwidth.
    #[arg(long)]
    calibration_prefix: Option<usize>,
}

#[derive(Args)]
struct CountArgs {
    /// Count the parameters of this model file.
    #[arg(long, conflicts_with_all = ["states", "frames", "dim"])]
    model: Option<PathBuf>,
    #[arg(long)]
    states: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    structure: Option<String>,
    #[arg(long)]
    latent_dim: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DemoKind {
    Zshape,
    Pickplace,
}

#[derive(Args)]
struct DemoArgs {
    #[arg(value_enum)]
    kind: DemoKind,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    demos: usize,
    /// Samples per demonstration.
    #[arg(long, default_value_t = 200)]
    length: usize,
    /// Noise standard deviation (zshape only).
    #[arg(long, default_value_t = 0.005)]
    noise: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> CliResult {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let mut out = std::io::stdout().lock();
    match cli.command {
        Command::Train(a) => cmd_train(&mut cfg, a, &mut out),
        Command::Adapt(a) => cmd_adapt(a, &mut out),
        Command::Generate(a) => cmd_generate(&mut cfg, a, &mut out),
        Command::Eval(a) => cmd_eval(&mut cfg, a, &mut out),
        Command::Segment(a) => cmd_segment(a, &mut out),
        Command::Cluster(a) => cmd_cluster(&mut cfg, a, &mut out),
        Command::CountParams(a) => cmd_count(&cfg, a, &mut out),
        Command::Demo(a) => cmd_demo(&cfg, a, &mut out),
    }
}

fn apply_model_flags(cfg: &mut RunConfig, f: ModelFlags) {
    if let Some(v) = f.states {
        cfg.states = v;
    }
    if let Some(v) = f.structure {
        cfg.structure = v.to_ascii_lowercase();
    }
    if let Some(v) = f.latent_dim {
        cfg.latent_dim = v;
    }
    if let Some(v) = f.tolerance {
        cfg.tolerance = v;
    }
    if let Some(v) = f.max_iters {
        cfg.max_iters = v;
    }
    if f.s_max.is_some() {
        cfg.s_max = f.s_max;
    }
    if let Some(v) = f.transition_smoothing {
        cfg.transition_smoothing = v;
    }
}

fn select(ds: &Dataset, split: &str) -> CliResult<Dataset> {
    Ok(ds.subset(&ds.split_indices(split)?)?)
}

fn cmd_train(cfg: &mut RunConfig, a: TrainArgs, out: &mut dyn Write) -> CliResult {
    apply_model_flags(cfg, a.model);
    let ds = select(&load_dataset(&a.data)?, &a.split)?;
    let em = cfg.em_config()?;
    let fit = train(&ds, cfg.states, &em)?;
    save_model(&a.out, &fit.model)?;
    let params = count_parameters(&ParameterLayout::from(em.structure), cfg.states, ds.n_frames, ds.dim);
    writeln!(out, "states: {}", cfg.states)?;
    writeln!(out, "structure: {}", cfg.structure)?;
    writeln!(out, "demonstrations: {}", ds.demos.len())?;
    writeln!(out, "converged: {}", fit.converged)?;
    writeln!(out, "parameters: {params}")?;
    writeln!(out, "iteration,log_likelihood")?;
    for (i, ll) in fit.log_likelihoods.iter().enumerate() {
        writeln!(out, "{i},{ll}")?;
    }
    Ok(())
}

fn cmd_adapt(a: AdaptArgs, out: &mut dyn Write) -> CliResult {
    let model = load_model(&a.model)?;
    let frames = load_frames(&a.frames)?;
    let adapted = adapt(&model, &frames)?;
    save_model(&a.out, &adapted.model)?;
    writeln!(out, "adapted {} states to {} frames", model.n_states(), frames.len())?;
    Ok(())
}

fn parse_vector(text: &str) -> CliResult<DVector<f64>> {
    let vals = text
        .split([',', ' '])
        .filter(|s| !s.is_empty())
        .map(|s| s.trim().parse::<f64>().map_err(|_| Failure::input(format!("not a number: {s:?}"))))
        .collect::<CliResult<Vec<_>>>()?;
    if vals.is_empty() {
        return Err(Failure::input("initial state is empty"));
    }
    Ok(DVector::from_vec(vals))
}

fn control_options(cfg: &mut RunConfig, c: ControlFlags, ds: Option<&Dataset>, horizon: usize) -> GenerateOptions {
    if let Some(r) = c.r_scalar {
        cfg.r_scalar = r;
    }
    let mut opts = match ds {
        Some(ds) => GenerateOptions::for_dataset(ds, horizon),
        None => GenerateOptions {
            horizon,
            ..GenerateOptions::default()
        },
    };
    opts.r_scalar = cfg.r_scalar;
    if let Some(dt) = c.dt {
        opts.dt = dt;
    }
    if c.position_dims.is_some() {
        opts.position_dims = c.position_dims;
    }
    opts.stochastic_seed = c.stochastic_seed;
    opts
}

fn cmd_generate(cfg: &mut RunConfig, a: GenerateArgs, out: &mut dyn Write) -> CliResult {
    let model = load_model(&a.model)?;
    if let Some(h) = a.horizon {
        cfg.horizon = h;
    }
    let ds = a.data.as_deref().map(load_dataset).transpose()?;
    let demo = match &ds {
        Some(ds) => Some(
            ds.demos
                .get(a.demo)
                .ok_or_else(|| Failure::input(format!("demo {} out of range ({} demos)", a.demo, ds.demos.len())))?,
        ),
        None => None,
    };
    let frames: Option<FrameSet> = match (&a.frames, demo) {
        (Some(p), _) => Some(load_frames(p)?),
        (None, Some(d)) if model.n_frames() > 1 => Some(d.frames.clone()),
        _ => None,
    };
    let initial = match (&a.initial, demo) {
        (Some(text), _) => parse_vector(text)?,
        (None, Some(d)) => d.points.row(0).transpose(),
        (None, None) => return Err(Failure::input("an initial state is required (--initial or --data)")),
    };
    let opts = control_options(cfg, a.control, ds.as_ref(), cfg.horizon);
    let g = generate(&model, frames.as_ref(), &initial, &opts)?;

    let p = g.position_dims;
    let n = g.rollout.states.ncols();
    let mut header = vec!["t".to_string()];
    header.extend((0..p).map(|i| format!("x{i}")));
    header.extend((0..n - p).map(|i| format!("v{i}")));
    let t_len = g.rollout.states.nrows();
    let table = DMatrix::from_fn(t_len, n + 1, |t, j| if j == 0 { t as f64 } else { g.rollout.states[(t, j - 1)] });
    match &a.out {
        Some(path) => save_table(path, &header, &table)?,
        None => write_table(out, &header, &table)?,
    }

    if let Some(path) = &a.reference {
        let d = g.reference.dim();
        let mut header = vec!["t".to_string(), "state".to_string()];
        header.extend((0..d).map(|i| format!("mean{i}")));
        header.extend((0..d).map(|i| format!("var{i}")));
        let table = DMatrix::from_fn(g.reference.len(), 2 + 2 * d, |t, j| {
            let step = &g.reference.steps[t];
            match j {
                0 => t as f64,
                1 => step.state as f64,
                j if j < 2 + d => step.mean[j - 2],
                j => step.cov[(j - 2 - d, j - 2 - d)],
            }
        });
        save_table(path, &header, &table)?;
    }
    Ok(())
}

fn cmd_eval(cfg: &mut RunConfig, a: EvalArgs, out: &mut dyn Write) -> CliResult {
    let model = load_model(&a.model)?;
    let ds = load_dataset(&a.data)?;
    let splits = if a.split.is_empty() {
        let mut labels = ds.split_labels().unwrap_or_else(|| vec!["all".to_string()]);
        labels.sort();
        labels.dedup();
        labels
    } else {
        a.split.clone()
    };
    let opts = control_options(cfg, a.control, Some(&ds), cfg.horizon);
    let mut rows = Vec::new();
    for split in &splits {
        let idx = ds.split_indices(split)?;
        let summary = evaluate(&model, &ds, &idx, &opts)?;
        rows.push((split.clone(), idx.len(), summary.mean, summary.std));
    }
    match a.format {
        Format::Rows => {
            writeln!(out, "split,demos,mse_mean,mse_std")?;
            for (s, n, m, sd) in &rows {
                writeln!(out, "{s},{n},{m},{sd}")?;
            }
        }
        Format::Text => {
            let w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(5);
            writeln!(out, "{:<w$}  {:>5}  {:>12}  {:>12}", "split", "demos", "mse_mean", "mse_std")?;
            for (s, n, m, sd) in &rows {
                writeln!(out, "{s:<w$}  {n:>5}  {m:>12.6e}  {sd:>12.6e}")?;
            }
        }
    }
    Ok(())
}

fn cmd_segment(a: SegmentArgs, out: &mut dyn Write) -> CliResult {
    let model = load_model(&a.model)?;
    let ds = load_dataset(&a.data)?;
    let mut text = String::from("demo,t,state\n");
    for (m, demo) in ds.demos.iter().enumerate() {
        let obs = project_demo(&demo.points, &demo.frames)?;
        for (t, s) in viterbi(&model, &obs)?.into_iter().enumerate() {
            let _ = writeln!(text, "{m},{t},{s}");
        }
    }
    match &a.out {
        Some(path) => std::fs::write(path, text).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?,
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}

fn cmd_cluster(cfg: &mut RunConfig, a: ClusterArgs, out: &mut dyn Write) -> CliResult {
    let sequences = match &a.data {
        Some(p) => load_dataset(p)?.points(),
        None => read_vector_lines(BufReader::new(std::io::stdin().lock()), "stdin")?,
    };
    if sequences.is_empty() {
        return Err(Failure::input("no observations to cluster"));
    }
    let s = &mut cfg.sva;
    for (dst, src) in [
        (&mut s.lambda, a.lambda),
        (&mut s.lambda1, a.lambda1),
        (&mut s.lambda2, a.lambda2),
        (&mut s.lambda3, a.lambda3),
        (&mut s.sigma, a.sigma),
    ] {
        if let Some(v) = src {
            *dst = v;
        }
    }
    if a.bandwidth.is_some() {
        s.bandwidth = a.bandwidth;
    }
    if let Some(v) = a.max_sweeps {
        s.max_sweeps = v;
    }
    if let Some(v) = a.calibration_prefix {
        s.calibration_prefix = v;
    }
    let rows: Vec<DVector<f64>> = sequences.iter().flat_map(rows_of).collect();
    let bandwidth = match s.bandwidth {
        Some(b) => b,
        None => calibrate_bandwidth(&rows[..rows.len().min(s.calibration_prefix.max(2))])?,
    };
    let hyper = SvaHyper {
        lambda: s.lambda,
        lambda1: s.lambda1,
        lambda2: s.lambda2,
        lambda3: s.lambda3,
        bandwidth,
        sigma: s.sigma,
    };
    let fit = sva_fit(&sequences, &hyper, s.max_sweeps)?;
    writeln!(out, "clusters: {}", fit.state.n_clusters())?;
    writeln!(out, "bandwidth: {bandwidth}")?;
    writeln!(out, "cluster,count,subspace_dim")?;
    for (i, c) in fit.state.clusters.iter().enumerate() {
        writeln!(out, "{i},{},{}", c.count, c.dim())?;
    }
    writeln!(out, "sweep,loss")?;
    for (i, l) in fit.losses.iter().enumerate() {
        writeln!(out, "{i},{l}")?;
    }
    if let Some(path) = &a.model_out {
        let model = sva_to_hsmm(&fit.state, &rows, &hyper)?;
        save_model(path, &model)?;
    }
    Ok(())
}

fn model_layout(model: &HsmmModel) -> ParameterLayout {
    ParameterLayout::from(model.structure)
}

fn cmd_count(cfg: &RunConfig, a: CountArgs, out: &mut dyn Write) -> CliResult {
    let n = match &a.model {
        Some(p) => {
            let m = load_model(p)?;
            count_parameters(&model_layout(&m), m.n_states(), m.n_frames(), m.dim())
        }
        None => {
            let structure = a.structure.unwrap_or_else(|| cfg.structure.clone()).to_ascii_lowercase();
            let layout = ParameterLayout::from(parse_structure(&structure, a.latent_dim.unwrap_or(cfg.latent_dim))?);
            let dim = a.dim.ok_or_else(|| Failure::input("--dim is required without --model"))?;
            count_parameters(&layout, a.states.unwrap_or(cfg.states), a.frames.unwrap_or(1), dim)
        }
    };
    writeln!(out, "parameters: {n}")?;
    Ok(())
}

fn cmd_demo(cfg: &RunConfig, a: DemoArgs, out: &mut dyn Write) -> CliResult {
    let ds = match a.kind {
        DemoKind::Zshape => gen_zshape(a.demos, a.length, a.noise, cfg.seed)?,
        DemoKind::Pickplace => gen_pickplace(a.demos, a.length, cfg.seed)?,
    };
    save_dataset(&a.out, &ds)?;
    writeln!(out, "wrote {} demonstrations to {}", ds.demos.len(), a.out.display())?;
    Ok(())
}
