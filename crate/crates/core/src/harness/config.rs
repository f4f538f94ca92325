//! Experiment configuration: a schema-checked JSON object with documented
//! defaults, plus dotted-path overrides for the CLI.

use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::DEFAULT_LAMBDA_BAR_GRID;
use crate::trainer::TrainConfig;

/// Version of the config schema this build understands.
pub const SCHEMA_VERSION: u32 = 1;

/// The experiments the harness can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    /// The 6×3 grid of meta-test losses (fixed and trained representations).
    Table2,
    /// Closed-form tr-val values vs Monte Carlo, plus Wishart identities.
    OracleValidation,
    /// Closed-form value-vs-rank profile and its argmin.
    RankScan,
    /// Exact outer gradients vs central finite differences.
    Gradcheck,
    /// Interpolation / residual-floor and meta-test lower-bound checks.
    BoundsCheck,
}

impl Experiment {
    pub fn slug(&self) -> &'static str {
        match self {
            Experiment::Table2 => "table2",
            Experiment::OracleValidation => "oracle_validation",
            Experiment::RankScan => "rank_scan",
            Experiment::Gradcheck => "gradcheck",
            Experiment::BoundsCheck => "bounds_check",
        }
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table2" => Ok(Experiment::Table2),
            "oracle_validation" => Ok(Experiment::OracleValidation),
            "rank_scan" => Ok(Experiment::RankScan),
            "gradcheck" => Ok(Experiment::Gradcheck),
            "bounds_check" => Ok(Experiment::BoundsCheck),
            other => Err(Error::Config(format!(
                "unknown experiment {other:?}; expected one of table2, oracle_validation, \
                 rank_scan, gradcheck, bounds_check"
            ))),
        }
    }
}

impl std::fmt::Display for Experiment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.slug())
    }
}

/// Everything an experiment run depends on. All fields except
/// `schema_version` are optional in the JSON file and default as documented;
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Must equal [`SCHEMA_VERSION`].
    pub schema_version: u32,
    /// Optional experiment name; when present it must match the experiment
    /// actually invoked (guards against running a config file under the
    /// wrong subcommand).
    #[serde(default)]
    pub experiment: Option<Experiment>,
    /// Ambient dimension (default 50).
    #[serde(default = "default_d")]
    pub d: usize,
    /// Task subspace dimension (default 5).
    #[serde(default = "default_k")]
    pub k: usize,
    /// Label noise standard deviation (default 0.5).
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Training configuration for the experiments that train models;
    /// per-row variant and λ are overridden by the experiment itself.
    #[serde(default)]
    pub train: TrainConfig,
    /// Monte Carlo tasks per evaluation cell (default 20 000).
    #[serde(default = "default_eval_tasks")]
    pub eval_tasks: usize,
    /// Monte Carlo tasks per λ̄ grid point during tuning (default 4 000).
    #[serde(default = "default_tune_tasks")]
    pub tune_tasks: usize,
    /// Budget for auxiliary Monte Carlo checks: interpolation/residual
    /// cells and the divergence-signature medians (default 10 000).
    #[serde(default = "default_aux_tasks")]
    pub aux_tasks: usize,
    /// Samples for the inverse-Wishart trace estimates (default 100 000).
    #[serde(default = "default_wishart_samples")]
    pub wishart_samples: usize,
    /// Meta-test adaptation sizes n̄₁ for the table grid (default [5, 15, 25]).
    #[serde(default = "default_nbar1_grid")]
    pub nbar1_grid: Vec<usize>,
    /// λ̄ tuning grid (default {0, 0.01, 0.03, 0.1, 0.3, 1, 3, 10, 100}).
    #[serde(default = "default_lambda_bar_grid")]
    pub lambda_bar_grid: Vec<f64>,
    /// Per-task sample count of the closed-form rank profile (default 15).
    #[serde(default = "default_scan_n1")]
    pub scan_n1: usize,
    /// Root seed; every stream in the run derives from it (default 2021).
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Output directory; the CLI falls back to `out/<experiment>`.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_d() -> usize {
    50
}
fn default_k() -> usize {
    5
}
fn default_sigma() -> f64 {
    0.5
}
fn default_eval_tasks() -> usize {
    20_000
}
fn default_tune_tasks() -> usize {
    4_000
}
fn default_aux_tasks() -> usize {
    10_000
}
fn default_wishart_samples() -> usize {
    100_000
}
fn default_nbar1_grid() -> Vec<usize> {
    vec![5, 15, 25]
}
fn default_lambda_bar_grid() -> Vec<f64> {
    DEFAULT_LAMBDA_BAR_GRID.to_vec()
}
fn default_scan_n1() -> usize {
    15
}
fn default_seed() -> u64 {
    2021
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            experiment: None,
            d: default_d(),
            k: default_k(),
            sigma: default_sigma(),
            train: TrainConfig::default(),
            eval_tasks: default_eval_tasks(),
            tune_tasks: default_tune_tasks(),
            aux_tasks: default_aux_tasks(),
            wishart_samples: default_wishart_samples(),
            nbar1_grid: default_nbar1_grid(),
            lambda_bar_grid: default_lambda_bar_grid(),
            scan_n1: default_scan_n1(),
            seed: default_seed(),
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    /// Parse and validate a JSON config, applying dotted-path overrides
    /// (e.g. `train.outer_steps=500`) before deserialization so that the
    /// schema check covers them too.
    pub fn from_json(json: &str, overrides: &[String]) -> Result<Self> {
        let mut value: serde_json::Value =
            serde_json::from_str(json).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        if !value.is_object() {
            return Err(Error::Config("config root must be a JSON object".into()));
        }
        for entry in overrides {
            apply_override(&mut value, entry)?;
        }
        let config: ExperimentConfig = serde_json::from_value(value)
            .map_err(|e| Error::Config(format!("config does not match the schema: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &std::path::Path, overrides: &[String]) -> Result<Self> {
        let json = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&json, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} not supported (this build understands {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.k < 1 || self.k > self.d {
            return Err(Error::Config(format!("need 1 ≤ k ≤ d; got k={}, d={}", self.k, self.d)));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!("sigma={} must be finite and ≥ 0", self.sigma)));
        }
        for (name, v) in [
            ("eval_tasks", self.eval_tasks),
            ("tune_tasks", self.tune_tasks),
            ("aux_tasks", self.aux_tasks),
            ("wishart_samples", self.wishart_samples),
        ] {
            if v < 2 {
                return Err(Error::Config(format!("{name}={v} must be ≥ 2")));
            }
        }
        if self.nbar1_grid.is_empty() || self.nbar1_grid.iter().any(|&n| n < 1) {
            return Err(Error::Config("nbar1_grid must be a nonempty list of sizes ≥ 1".into()));
        }
        if self.lambda_bar_grid.is_empty()
            || self.lambda_bar_grid.iter().any(|l| !(*l >= 0.0) || !l.is_finite())
        {
            return Err(Error::Config("lambda_bar_grid must be nonempty with finite entries ≥ 0".into()));
        }
        if self.scan_n1 < 1 {
            return Err(Error::Config("scan_n1 must be ≥ 1".into()));
        }
        self.train.validate().map_err(|e| Error::Config(format!("train config: {e}")))?;
        Ok(())
    }
}

/// Apply one `path.to.key=value` override into the JSON tree. The value is
/// parsed as JSON when possible (numbers, booleans, arrays, quoted strings)
/// and falls back to a plain string otherwise, so `--override seed=7` and
/// `--override train.grad_mode=exact` both read naturally.
fn apply_override(root: &mut serde_json::Value, entry: &str) -> Result<()> {
    let (path, raw) = entry
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {entry:?} is not of the form key=value")))?;
    if path.is_empty() {
        return Err(Error::Config(format!("override {entry:?} has an empty key")));
    }
    let parsed: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));

    let mut node = root;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        if seg.is_empty() {
            return Err(Error::Config(format!("override {entry:?} has an empty path segment")));
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override {entry:?}: {seg:?} is not inside an object")))?;
        if i + 1 == segments.len() {
            obj.insert((*seg).to_string(), parsed);
            break;
        }
        node = obj
            .entry((*seg).to_string())
            .or_insert_with(|| serde_json::Value::Object(serde_json::Map::new()));
    }
    Ok(())
}
