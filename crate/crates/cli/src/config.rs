//! Run configuration: a versioned JSON document, optionally overridden by
//! command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use laxoc_core::scenarios::{self, DeclarativeSpec};
use laxoc_core::{ProblemClass, ProblemInstance, ReconstructOptions, SolverOptions, TimeGrid};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: u32 = 1;

/// Builtins whose initial state is drawn at random and therefore need a seed.
const RANDOMIZED: [&str; 2] = ["example_a", "example_b"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub reconstruction: ReconstructOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScenarioConfig {
    Builtin {
        name: String,
        #[serde(default = "one")]
        robots: usize,
    },
    Declarative {
        name: String,
        class: ProblemClass,
        #[serde(default)]
        time_invariant: bool,
        horizon: f64,
        x0: Vec<f64>,
        spec: DeclarativeSpec,
    },
}

fn one() -> usize {
    1
}

/// Either a step length or a step count; neither means `dt = 0.1`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
}

pub const DEFAULT_DT: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub max_iter: usize,
    /// Stationarity tolerance.
    pub tol: f64,
    pub feas_tol: f64,
    pub smoothing_floor: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let d = SolverOptions::default();
        SolverConfig { max_iter: 100_000, tol: d.stat_tol, feas_tol: d.feas_tol, smoothing_floor: d.smoothing_floor }
    }
}

impl SolverConfig {
    pub fn options(&self, verbose: bool) -> SolverOptions {
        SolverOptions {
            max_iter: self.max_iter,
            stat_tol: self.tol,
            feas_tol: self.feas_tol,
            smoothing_floor: self.smoothing_floor,
            verbose,
            ..SolverOptions::default()
        }
    }
}

impl RunConfig {
    pub fn builtin(name: &str, robots: usize, seed: Option<u64>) -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            scenario: ScenarioConfig::Builtin { name: name.to_string(), robots },
            grid: GridConfig::default(),
            solver: SolverConfig::default(),
            reconstruction: ReconstructOptions::default(),
            output: None,
            seed,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).context("config does not match the schema")?;
        if cfg.schema_version != SCHEMA_VERSION {
            bail!("unsupported schema_version {} (expected {SCHEMA_VERSION})", cfg.schema_version);
        }
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in config {}", path.display()))
    }

    /// Canonical JSON used for hashing and for the manifest.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config always serialises")
    }

    /// Hex SHA-256 of the canonical JSON, output directory excluded so that
    /// moving a run does not change its identity.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = None;
        hex(&Sha256::digest(c.canonical_json().as_bytes()))
    }

    pub fn time_grid(&self, horizon: f64) -> Result<TimeGrid> {
        let grid = match (self.grid.dt, self.grid.steps) {
            (Some(_), Some(_)) => bail!("grid: give either dt or steps, not both"),
            (None, Some(k)) => TimeGrid::with_steps(horizon, k),
            (dt, None) => TimeGrid::uniform(horizon, dt.unwrap_or(DEFAULT_DT)),
        };
        grid.context("grid")
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Builds the instance and grid a config describes.
pub fn load_instance(cfg: &RunConfig) -> Result<(ProblemInstance, TimeGrid)> {
    let inst = match &cfg.scenario {
        ScenarioConfig::Builtin { name, robots } => {
            let seed = match cfg.seed {
                Some(s) => s,
                None if RANDOMIZED.contains(&name.as_str()) => {
                    bail!("scenario.name: '{name}' draws its initial state at random, a seed is required")
                }
                None => 0,
            };
            scenarios::builtin(name, *robots, seed).with_context(|| format!("scenario.name: '{name}'"))?
        }
        ScenarioConfig::Declarative { name, class, time_invariant, horizon, x0, spec } => {
            scenarios::declarative(name, spec.clone(), *class, *time_invariant, *horizon, x0.clone())
                .context("scenario.spec")?
        }
    };
    let grid = cfg.time_grid(inst.horizon)?;
    Ok((inst, grid))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_bit_exactly() {
        let mut cfg = RunConfig::builtin("example_a", 3, Some(7));
        cfg.grid.dt = Some(0.1);
        cfg.solver.tol = 1.0 / 3.0;
        let text = cfg.canonical_json();
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.canonical_json(), text);
    }

    #[test]
    fn rejects_other_schema_versions() {
        let mut v = serde_json::to_value(RunConfig::builtin("toy_1d", 1, None)).unwrap();
        v["schema_version"] = 2.into();
        assert!(RunConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn randomized_builtin_needs_seed() {
        let err = load_instance(&RunConfig::builtin("example_b", 2, None)).unwrap_err();
        assert!(format!("{err:#}").contains("seed"));
        assert!(load_instance(&RunConfig::builtin("toy_1d", 1, None)).is_ok());
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = RunConfig::builtin("toy_1d", 1, None);
        let mut b = a.clone();
        b.output = Some("/tmp/elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn grid_choice() {
        let mut cfg = RunConfig::builtin("example_a", 3, Some(7));
        assert_eq!(cfg.time_grid(2.0).unwrap().steps(), 20);
        cfg.grid.steps = Some(8);
        cfg.grid.dt = Some(0.1);
        assert!(cfg.time_grid(2.0).is_err());
        cfg.grid.dt = None;
        assert_eq!(cfg.time_grid(2.0).unwrap().steps(), 8);
    }
}
