//! TOML run configuration.
//!
//! Every table rejects unknown keys, so a typo surfaces as a parse error naming the key
//! and its line. `--set key=value` overrides are applied to the parsed document before
//! it is deserialized.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bounds::{default_beta_grid, default_horizon_grid};
use crate::domain::{make_lq_problem, ActionSpace, ControlProblem, Convection, Grid, LqProblemSpec, Polynomial, DEFAULT_N_QUAD};
use crate::flow::Scheduler;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{0}")]
    Parse(String),
    #[error("missing required table or key `{0}`")]
    Missing(&'static str),
    #[error("invalid value for `{key}`: {msg}")]
    Invalid { key: String, msg: String },
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn invalid(key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key: key.to_string(), msg: msg.into() }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Polynomial>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<Polynomial>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub convection: Option<Convection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actions: Option<ActionsConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lq: Option<LqConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hjb: Option<HjbConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow: Option<FlowConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<BoundsConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc: Option<McConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub left: f64,
    pub right: f64,
    pub n_interior: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ActionsConfig {
    Discrete {
        values: Vec<f64>,
    },
    Interval {
        alpha: f64,
        beta: f64,
        #[serde(default = "default_n_quad")]
        n_quad: usize,
    },
}

fn default_n_quad() -> usize {
    DEFAULT_N_QUAD
}

/// Coefficients of `b = b_bar + b_hat a`, `c = c_bar + c_hat a`, `f = f_bar + f_tilde a + f_hat a²`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqConfig {
    #[serde(default)]
    pub b_bar: Polynomial,
    #[serde(default)]
    pub b_hat: Polynomial,
    #[serde(default)]
    pub c_bar: Polynomial,
    #[serde(default)]
    pub c_hat: Polynomial,
    #[serde(default)]
    pub f_bar: Polynomial,
    #[serde(default)]
    pub f_tilde: Polynomial,
    #[serde(default)]
    pub f_hat: Polynomial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HjbConfig {
    pub taus: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

fn default_max_iter() -> usize {
    crate::hjb::DEFAULT_MAX_ITER
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub scheduler: Scheduler,
    pub horizon: f64,
    pub dt: f64,
    /// Interior node indices, `1..=n_interior`.
    pub probes: Vec<usize>,
    #[serde(default = "one")]
    pub record_every: usize,
    /// Decompose every k-th record; each distinct τ costs one HJB solve.
    #[serde(default = "one")]
    pub decompose_every: usize,
    #[serde(default = "yes")]
    pub check_stability: bool,
    /// Optional restart file holding `Z_0` as a CSV matrix.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z0: Option<String>,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsConfig {
    #[serde(default = "default_beta_grid")]
    pub betas: Vec<f64>,
    #[serde(default = "default_horizon_grid")]
    pub horizons: Vec<f64>,
    #[serde(default = "unit")]
    pub c: f64,
    #[serde(default = "unit")]
    pub alpha: f64,
    /// Schedulers whose growth integrals are tabulated at `growth_s`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub growth: Vec<Scheduler>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub growth_s: Vec<f64>,
}

fn unit() -> f64 {
    1.0
}

impl Default for BoundsConfig {
    fn default() -> Self {
        Self {
            betas: default_beta_grid(),
            horizons: default_horizon_grid(),
            c: 1.0,
            alpha: 1.0,
            growth: Vec::new(),
            growth_s: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McPolicy {
    /// Regularized optimal policy at `tau`.
    #[default]
    Optimal,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    pub tau: f64,
    /// τ used on the PDE side; differs from `tau` only in negative controls.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pde_tau: Option<f64>,
    /// Probe positions in the open domain.
    pub probes: Vec<f64>,
    pub n_paths: usize,
    pub dt_sim: f64,
    #[serde(default)]
    pub policy: McPolicy,
    /// Added to `3·stderr` before a probe counts as a failure.
    #[serde(default = "default_allowance")]
    pub bias_allowance: f64,
}

fn default_allowance() -> f64 {
    5e-3
}

impl Config {
    pub fn from_path(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_str_with(&text, overrides)
    }

    pub fn from_str_with(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        if overrides.is_empty() {
            return toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()));
        }
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let merged = toml::to_string(&doc).map_err(|e| ConfigError::Parse(e.to_string()))?;
        toml::from_str(&merged).map_err(|e| ConfigError::Parse(format!("after --set overrides: {e}")))
    }

    /// Canonical TOML form; parsing it back yields an identical `Config`.
    pub fn resolved(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the resolved form, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.resolved().as_bytes()))
    }

    pub fn problem(&self) -> Result<ControlProblem, ConfigError> {
        let gc = self.grid.as_ref().ok_or(ConfigError::Missing("grid"))?;
        let grid = Grid::new(gc.left, gc.right, gc.n_interior).map_err(|e| invalid("grid", e.to_string()))?;
        let actions = match self.actions.as_ref().ok_or(ConfigError::Missing("actions"))? {
            ActionsConfig::Discrete { values } => ActionSpace::discrete(values),
            ActionsConfig::Interval { alpha, beta, n_quad } => ActionSpace::interval(*alpha, *beta, *n_quad),
        }
        .map_err(|e| invalid("actions", e.to_string()))?;
        let lq = self.lq.as_ref().ok_or(ConfigError::Missing("lq"))?;
        let sigma = self.sigma.as_ref().ok_or(ConfigError::Missing("sigma"))?;
        let g = self.g.clone().unwrap_or_default();
        let (alpha, beta) = actions.range();
        // a single discrete action still needs a nondegenerate LQ range
        let (alpha, beta) = if alpha < beta { (alpha, beta) } else { (alpha - 1.0, beta + 1.0) };
        let spec = LqProblemSpec {
            b_bar: lq.b_bar.to_fn(),
            b_hat: lq.b_hat.to_fn(),
            c_bar: lq.c_bar.to_fn(),
            c_hat: lq.c_hat.to_fn(),
            f_bar: lq.f_bar.to_fn(),
            f_tilde: lq.f_tilde.to_fn(),
            f_hat: lq.f_hat.to_fn(),
            alpha,
            beta,
        };
        let problem = make_lq_problem(spec, grid, actions, sigma.to_fn(), g.to_fn()).map_err(|e| invalid("lq", e.to_string()))?;
        Ok(problem.with_convection(self.convection.unwrap_or_default()))
    }
}

/// `a.b.c=value`; the value is parsed as a TOML literal, falling back to a bare string.
fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| invalid(spec, "expected key=value"))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key v"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    if value.is_table() || value.is_array() {
        return Err(invalid(key, "only scalar keys can be overridden"));
    }
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(invalid(key, "malformed key"));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| invalid(key, format!("`{p}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
