//! Run configuration: one JSON file describes one run.
//!
//! ```json
//! {
//!   "name": "hpp",
//!   "params": { "rho": 0.05, "A": 0.1, ..., "variant": "HPP" },
//!   "marks": { "kind": "NONE" },
//!   "grid": { "K_lo": 0.1, "K_hi": 10, "N_K": 256, "P_lo": 0.1, "P_hi": 10, "N_P": 128 },
//!   "scheme": { "method": "HOWARD", "tol": 1e-8 },
//!   "simulation": { "n_paths": 20000, "T": 200, "dt": 0.00390625, "master_seed": 1 },
//!   "probes": [[1.0, 1.0]],
//!   "verify": { "grid_budget": 0.02 },
//!   "sweep": { "param": "lambda1", "values": [0, 0.01, 0.02] },
//!   "outdir": "out"
//! }
//! ```
//!
//! `marks`, `scheme`, `probes`, `verify`, `sweep` and `outdir` are optional.
//! Unknown keys are rejected everywhere.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::grid::{Grid, GridSpec};
use crate::model::{MarkModel, Model, ModelParams, State};
use crate::simulate::SimSpec;
use crate::solver::SchemeOpts;
use crate::verify::{default_probes, VerifySettings};

#[derive(Error, Debug)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("malformed config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// One-parameter sweep: the run is repeated with `param` set to each value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub param: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub params: ModelParams,
    #[serde(default)]
    pub marks: MarkModel,
    pub grid: GridSpec,
    #[serde(default)]
    pub scheme: SchemeOpts,
    pub simulation: SimSpec,
    /// `[K, P]` pairs; five diagonal grid states when absent.
    #[serde(default)]
    pub probes: Option<Vec<[f64; 2]>>,
    #[serde(default)]
    pub verify: VerifySettings,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    #[serde(default)]
    pub outdir: Option<PathBuf>,
}

fn invalid(e: impl std::fmt::Display) -> ConfigError {
    ConfigError::Invalid(e.to_string())
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        Self::from_json(&text)
    }

    /// Every module-level invariant, checked before anything runs.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return Err(invalid(format!("name {:?} must be non-empty and use only [A-Za-z0-9_-]", self.name)));
        }
        let model = self.model()?;
        let grid = self.grid()?;
        self.scheme.validate().map_err(invalid)?;
        self.simulation.validate().map_err(invalid)?;
        self.verify.validate().map_err(invalid)?;
        for s in self.probes()? {
            if !grid.contains(s.k, s.p) {
                return Err(invalid(format!("probe ({}, {}) lies outside the grid", s.k, s.p)));
            }
        }
        if let Some(sw) = &self.sweep {
            if sw.values.is_empty() {
                return Err(invalid("sweep needs at least one value"));
            }
            for &x in &sw.values {
                let mut p = model.params;
                set_param(&mut p, &sw.param, x)?;
                Model::new(p, self.marks.clone()).map_err(|e| invalid(format!("sweep {} = {x}: {e}", sw.param)))?;
            }
        }
        Ok(())
    }

    pub fn model(&self) -> Result<Model, ConfigError> {
        Model::new(self.params, self.marks.clone()).map_err(invalid)
    }

    pub fn grid(&self) -> Result<Grid, ConfigError> {
        self.grid.build().map_err(invalid)
    }

    pub fn probes(&self) -> Result<Vec<State>, ConfigError> {
        match &self.probes {
            None => Ok(default_probes(&self.grid)),
            Some(ps) if ps.is_empty() => Err(invalid("probes must not be empty")),
            Some(ps) => ps.iter().map(|&[k, p]| State::new(k, p).map_err(invalid)).collect(),
        }
    }

    /// SHA-256 of the canonical JSON form, output directory excluded, so
    /// moving the outputs elsewhere does not change the hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.outdir = None;
        let json = serde_json::to_string(&c).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `<name>-<first 12 hex digits of the hash>`.
    pub fn run_id(&self) -> String {
        format!("{}-{}", self.name, &self.hash()[..12])
    }
}

/// Set a scalar model parameter by its config name.
pub fn set_param(p: &mut ModelParams, name: &str, x: f64) -> Result<(), ConfigError> {
    let slot = match name {
        "rho" => &mut p.rho,
        "A" => &mut p.a,
        "phi" => &mut p.phi,
        "sigma_ab" => &mut p.sigma_ab,
        "alpha" => &mut p.alpha,
        "chi" => &mut p.chi,
        "epsilon" => &mut p.epsilon,
        "beta" => &mut p.beta,
        "delta" => &mut p.delta,
        "xi" => &mut p.xi,
        "eta" => &mut p.eta,
        "lambda0" => &mut p.lambda0,
        "lambda1" => &mut p.lambda1,
        "sigma_P" => &mut p.sigma_p,
        other => return Err(invalid(format!("unknown sweep parameter {other:?}"))),
    };
    *slot = x;
    Ok(())
}
