//! Experiment configuration: one JSON file describing the model, the pilot
//! chain, the epsilon ladder, time meshes, test functions and path counts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{Grid, GridField, ModeSpec};
use crate::kinetic::KineticProblem;
use crate::moments::PhaseField;
use crate::pilot::{ChainSpec, PilotChain};
use crate::velocity::{VelocityModel, VelocitySpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub dim: usize,
    pub resolution: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSpec {
    /// Macroscopic horizon.
    pub t_end: f64,
    /// Spacing of the record mesh.
    pub record_dt: f64,
    /// Kinetic step as a multiple of `eps^2`.
    #[serde(default = "default_kinetic_dt_factor")]
    pub kinetic_dt_factor: f64,
    /// Step of the limit-equation solver.
    #[serde(default = "default_spde_dt")]
    pub spde_dt: f64,
    /// Burn-in in units of the mixing time.
    #[serde(default = "default_burn_in")]
    pub burn_in: f64,
}

fn default_kinetic_dt_factor() -> f64 {
    0.25
}

fn default_spde_dt() -> f64 {
    1e-3
}

fn default_burn_in() -> f64 {
    10.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathCounts {
    /// Kinetic paths per epsilon for the scaling study.
    pub kinetic: usize,
    /// Kinetic paths at the smallest epsilon for the law comparison.
    pub law: usize,
    /// Limit-equation paths.
    pub spde: usize,
    /// Samples for the stationary Monte-Carlo identities.
    pub monte_carlo: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub grid: GridSpec,
    pub model: VelocitySpec,
    pub chain: ChainSpec,
    /// Initial density `rho_in`; the kinetic datum is `rho_in M`.
    pub initial: ModeSpec,
    /// Strictly decreasing.
    pub epsilons: Vec<f64>,
    pub time: TimeSpec,
    /// Test profiles `xi_k`.
    pub test_functions: Vec<ModeSpec>,
    /// Times at which ensemble laws are compared; must lie on the record mesh.
    pub observation_times: Vec<f64>,
    pub paths: PathCounts,
    pub base_seed: u64,
    pub output_dir: PathBuf,
}

fn config_error(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_string(),
        message: message.into(),
    }
}

/// Index of `t` on the mesh `k * dt`, if it lies on it.
pub fn mesh_index(t: f64, dt: f64) -> Option<usize> {
    let k = (t / dt).round();
    ((k * dt - t).abs() <= 1e-9 * dt.max(t.abs())).then_some(k as usize)
}

impl ExperimentConfig {
    /// Parse with field-path and line/column diagnostics, then validate.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let mut de = serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(&mut de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            config_error(
                &path,
                format!("line {} column {}: {inner}", inner.line(), inner.column()),
            )
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text).map_err(|e| match e {
            Error::Config { path: field, message } => Error::Config {
                path: format!("{}: {field}", path.display()),
                message,
            },
            other => other,
        })
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// SHA-256 of the compact serialisation.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilons.is_empty() {
            return Err(config_error("epsilons", "at least one epsilon is required"));
        }
        if self.epsilons.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return Err(config_error("epsilons", "every epsilon must be positive and finite"));
        }
        if self.epsilons.windows(2).any(|w| w[1] >= w[0]) {
            return Err(config_error("epsilons", "epsilon list must be strictly decreasing"));
        }
        let p = &self.paths;
        for (name, v) in [
            ("paths.kinetic", p.kinetic),
            ("paths.law", p.law),
            ("paths.spde", p.spde),
            ("paths.monte_carlo", p.monte_carlo),
        ] {
            if v < 2 {
                return Err(config_error(name, format!("path count must be at least 2, got {v}")));
            }
        }
        let t = &self.time;
        for (name, v) in [
            ("time.t_end", t.t_end),
            ("time.record_dt", t.record_dt),
            ("time.kinetic_dt_factor", t.kinetic_dt_factor),
            ("time.spde_dt", t.spde_dt),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config_error(name, format!("must be positive and finite, got {v}")));
            }
        }
        if !(t.burn_in >= 0.0 && t.burn_in.is_finite()) {
            return Err(config_error("time.burn_in", "must be non-negative"));
        }
        if t.kinetic_dt_factor > 0.5 {
            return Err(config_error("time.kinetic_dt_factor", "kinetic step must not exceed eps^2 / 2"));
        }
        if mesh_index(t.t_end, t.record_dt).is_none() {
            return Err(config_error("time.record_dt", "horizon must be a whole number of record steps"));
        }
        if mesh_index(t.record_dt, t.spde_dt).is_none() {
            return Err(config_error("time.spde_dt", "record spacing must be a whole number of steps"));
        }
        if self.test_functions.is_empty() {
            return Err(config_error("test_functions", "at least one test function is required"));
        }
        for (k, &o) in self.observation_times.iter().enumerate() {
            if !(o > 0.0 && o <= t.t_end * (1.0 + 1e-12)) || mesh_index(o, t.record_dt).is_none() {
                return Err(config_error(
                    &format!("observation_times[{k}]"),
                    format!("{o} is not a positive record time within the horizon"),
                ));
            }
        }
        Ok(())
    }

    /// Build every numerical object; inadmissible pairs fail here with the
    /// violated hypothesis named.
    pub fn build(&self) -> Result<Experiment> {
        let grid = Grid::new(self.grid.dim, self.grid.resolution)?;
        let model = self.model.build()?;
        if model.dim() != grid.dim() {
            return Err(config_error(
                "model",
                format!("velocity dimension {} differs from grid dimension {}", model.dim(), grid.dim()),
            ));
        }
        let (chain, scale_factor) = self.chain.build(&grid, model.alpha())?;
        let rho_in = GridField::from_modes(&grid, &self.initial)?;
        let xis = self
            .test_functions
            .iter()
            .map(|m| GridField::from_modes(&grid, m))
            .collect::<Result<Vec<_>>>()?;
        let problem = KineticProblem::new(chain.clone(), model.clone())?;
        Ok(Experiment {
            config: self.clone(),
            grid,
            model,
            chain,
            scale_factor,
            rho_in,
            xis,
            problem,
        })
    }
}

/// A validated config together with its numerical objects.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub grid: Grid,
    pub model: VelocityModel,
    pub chain: PilotChain,
    /// Factor applied to the chain states by `fit_to_ball`.
    pub scale_factor: f64,
    pub rho_in: GridField,
    pub xis: Vec<GridField>,
    pub problem: KineticProblem,
}

impl Experiment {
    /// Kinetic datum `rho_in M`.
    pub fn f_in(&self) -> PhaseField {
        PhaseField::local_equilibrium(&self.rho_in, &self.model)
    }

    pub fn admissibility(&self) -> AdmissibilityReport {
        let gap = self.chain.spectral_gap();
        AdmissibilityReport {
            states: self.chain.len(),
            radius: self.chain.radius(),
            alpha: self.model.alpha(),
            margin: self.chain.margin(),
            spectral_gap: gap.is_finite().then_some(gap),
            reversible: self.chain.is_reversible(),
            min_tilted_equilibrium: self.problem.min_tilted_equilibrium(),
            scale_factor: self.scale_factor,
        }
    }
}

/// Admissibility summary printed by `validate`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmissibilityReport {
    pub states: usize,
    pub radius: f64,
    pub alpha: f64,
    /// `alpha / 4 - R`.
    pub margin: f64,
    /// `None` for a single-state chain (infinite gap).
    pub spectral_gap: Option<f64>,
    pub reversible: bool,
    /// `min (M_j + v_j . grad n_i)`; non-negative guarantees positivity.
    pub min_tilted_equilibrium: f64,
    pub scale_factor: f64,
}
