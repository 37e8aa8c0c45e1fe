//! Run configuration: defaults, optional JSON file, command-line overrides.

use std::path::Path;

use imitate_core::bnp_sva::SvaHyper;
use imitate_core::latent::CovarianceStructure;
use imitate_core::lqt::DEFAULT_CONTROL_WEIGHT;
use imitate_core::markov::EmConfig;
use serde::Deserialize;

use crate::Failure;

/// Environment variable holding the default seed.
pub const SEED_ENV: &str = "IMITATE_SEED";

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvaConfig {
    pub lambda: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// `None` calibrates from the first observations of the stream.
    pub bandwidth: Option<f64>,
    pub sigma: f64,
    pub max_sweeps: usize,
    /// Observations used to calibrate the bandwidth.
    pub calibration_prefix: usize,
}

impl Default for SvaConfig {
    fn default() -> Self {
        let h = SvaHyper::default();
        Self {
            lambda: h.lambda,
            lambda1: h.lambda1,
            lambda2: h.lambda2,
            lambda3: h.lambda3,
            bandwidth: None,
            sigma: h.sigma,
            max_sweeps: 50,
            calibration_prefix: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub states: usize,
    /// `full`, `mfa`, `mppca` or `semitied`.
    pub structure: String,
    pub latent_dim: usize,
    pub tolerance: f64,
    pub max_iters: usize,
    pub r_scalar: f64,
    pub horizon: usize,
    pub s_max: Option<usize>,
    pub transition_smoothing: f64,
    pub sva: SvaConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let em = EmConfig::default();
        Self {
            seed: em.seed,
            states: 7,
            structure: "full".into(),
            latent_dim: 1,
            tolerance: em.tolerance,
            max_iters: em.max_iters,
            r_scalar: DEFAULT_CONTROL_WEIGHT,
            horizon: 100,
            s_max: None,
            transition_smoothing: em.transition_smoothing,
            sva: SvaConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults, then the config file, then the seed environment variable
    /// when the file does not set one.
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Failure::input(format!("{}: {e}", p.display())))?;
                let value: serde_json::Value =
                    serde_json::from_str(&text).map_err(|e| Failure::input(format!("{}: {e}", p.display())))?;
                let has_seed = value.get("seed").is_some();
                let mut cfg: RunConfig =
                    serde_json::from_value(value).map_err(|e| Failure::input(format!("{}: {e}", p.display())))?;
                if !has_seed {
                    cfg.seed = env_seed()?.unwrap_or(cfg.seed);
                }
                cfg
            }
            None => RunConfig {
                seed: env_seed()?.unwrap_or(0),
                ..RunConfig::default()
            },
        };
        cfg.structure = cfg.structure.to_ascii_lowercase();
        Ok(cfg)
    }

    pub fn covariance_structure(&self) -> Result<CovarianceStructure, Failure> {
        parse_structure(&self.structure, self.latent_dim)
    }

    pub fn em_config(&self) -> Result<EmConfig, Failure> {
        Ok(EmConfig {
            max_iters: self.max_iters,
            tolerance: self.tolerance,
            seed: self.seed,
            structure: self.covariance_structure()?,
            s_max: self.s_max,
            transition_smoothing: self.transition_smoothing,
            ..EmConfig::default()
        })
    }
}

fn env_seed() -> Result<Option<u64>, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::input(format!("{SEED_ENV} must be a non-negative integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

pub fn parse_structure(name: &str, latent_dim: usize) -> Result<CovarianceStructure, Failure> {
    match name {
        "full" => Ok(CovarianceStructure::Full),
        "semitied" | "semi-tied" => Ok(CovarianceStructure::SemiTied),
        "mfa" => Ok(CovarianceStructure::mfa(latent_dim)),
        "mppca" => Ok(CovarianceStructure::mppca(latent_dim)),
        other => Err(Failure::input(format!(
            "unknown covariance structure {other:?} (expected full, mfa, mppca or semitied)"
        ))),
    }
}
