//! JSON experiment configuration, validated before any computation starts.

use std::path::{Path, PathBuf};

use exvar_core::homogenize::admissible;
use exvar_core::lattice::Torus;
use exvar_core::rates::RateFamily;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, LabResult};
use crate::observable::parse_observable;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    VarianceDecay,
    SepDecay,
    HomogGap,
}

/// How Var_ρ[P_t u] is evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Spectral for constant rates, exact generator for tiny tori, Monte Carlo otherwise.
    #[default]
    Auto,
    /// Chaos levels evolved spectrally; constant rates only.
    Spectral,
    /// Full generator on {0,1}^torus.
    Exact,
    MonteCarlo,
}

/// Symmetric exclusion kernel for `sep-decay`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelSpec {
    /// Q_{±e_i} = rate.
    NearestNeighbor(f64),
    /// Explicit list of (offset, rate).
    Offsets(Vec<(Vec<i64>, f64)>),
    /// Kernel designed for a covariance matrix Σ_y Q_y y yᵀ.
    Covariance(Vec<Vec<f64>>),
    /// Kernel designed for a diffusion matrix D (covariance 2D).
    Diffusion(Vec<Vec<f64>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    #[serde(default = "default_rates")]
    pub rates: String,
    pub rho: f64,
    #[serde(default = "default_dim")]
    pub dim: usize,
    pub side: usize,
    pub t_grid: Vec<f64>,
    /// Cell-problem scales; the largest is used for predictions.
    #[serde(default = "default_scales")]
    pub m: Vec<u32>,
    #[serde(default)]
    pub replicas: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_observable")]
    pub observable: String,
    #[serde(default)]
    pub method: Method,
    #[serde(default)]
    pub kernel: Option<KernelSpec>,
    /// Averaging radii for `homog-gap`; 0 is the unregularized probe.
    #[serde(default = "default_radii")]
    pub k: Vec<u32>,
    /// Allow times past the boundary-safe horizon in Monte Carlo runs.
    #[serde(default)]
    pub torus_horizon: bool,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_rates() -> String {
    "kind=ssep".into()
}

fn default_dim() -> usize {
    1
}

fn default_scales() -> Vec<u32> {
    vec![1]
}

fn default_observable() -> String {
    "occ(0)".into()
}

fn default_radii() -> Vec<u32> {
    vec![0, 1]
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> LabResult<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> LabResult<ExperimentConfig> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn torus(&self) -> LabResult<Torus> {
        Ok(Torus::new(self.dim, self.side)?)
    }

    pub fn rate_family(&self) -> LabResult<RateFamily> {
        Ok(RateFamily::parse(&self.rates, self.dim)?)
    }

    pub fn largest_scale(&self) -> u32 {
        self.m.iter().copied().max().unwrap_or(1)
    }

    pub fn validate(&self) -> LabResult<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return config_err(format!("rho = {} must lie in (0, 1)", self.rho));
        }
        if self.dim == 0 || self.dim > 3 {
            return config_err(format!("dim = {} must be 1, 2 or 3", self.dim));
        }
        self.torus()?;
        validate_grid(&self.t_grid)?;
        parse_observable(&self.observable, self.dim, self.rho)?;
        match self.experiment {
            Experiment::VarianceDecay | Experiment::HomogGap => {
                self.rate_family()?;
                if self.m.is_empty() {
                    return config_err("at least one cell scale m is needed");
                }
                if let Some(&m) = self.m.iter().find(|&&m| !admissible(self.dim, m)) {
                    return config_err(format!("cell scale m = {m} is not admissible in dimension {}", self.dim));
                }
            }
            Experiment::SepDecay => {
                if self.kernel.is_none() {
                    self.rate_family()?;
                }
            }
        }
        if self.experiment == Experiment::VarianceDecay && self.method == Method::MonteCarlo && self.replicas < 2 {
            return config_err("Monte Carlo needs at least 2 replicas");
        }
        if self.experiment == Experiment::HomogGap && self.k.is_empty() {
            return config_err("homog-gap needs at least one averaging radius k");
        }
        Ok(())
    }
}

/// Positive, finite, strictly increasing.
pub fn validate_grid(t: &[f64]) -> LabResult<()> {
    if t.is_empty() {
        return config_err("empty time grid");
    }
    if t.iter().any(|&x| x.is_nan() || x <= 0.0 || !x.is_finite()) {
        return config_err("times must be positive and finite");
    }
    if t.windows(2).any(|w| w[1] <= w[0]) {
        return config_err("time grid must be strictly increasing");
    }
    Ok(())
}
