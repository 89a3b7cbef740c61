//! Argument parsing, config merging and the error-JSON contract.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use laxoc_core::hj_oracle::HjKind;
use serde_json::json;

use crate::commands::{self, GridArgs, Run};
use crate::config::{RunConfig, ScenarioConfig};

pub const OUT_ENV: &str = "LAXOC_OUT";
const DEFAULT_OUT: &str = "laxoc-out";

#[derive(Debug, Parser)]
#[command(name = "laxoc", version, about = "Min-max and min-min state-constrained optimal control via Lax formulae")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Builtin scenario: example_a, example_b, toy_1d, toy_drift, toy_lq, toy_nonzero_l_minmin.
    #[arg(long, global = true)]
    pub scenario: Option<String>,
    /// JSON run configuration; flags given alongside override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub robots: Option<usize>,
    /// Uniform grid step.
    #[arg(long, global = true)]
    pub dt: Option<f64>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; falls back to the config, then $LAXOC_OUT, then ./laxoc-out.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long = "max-iter", global = true)]
    pub max_iter: Option<usize>,
    /// Stationarity tolerance of the solver.
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    /// Per-iteration solver log on stderr.
    #[arg(long, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the transcribed program; writes solution.json and the grid trajectory.
    Solve,
    /// Solve, reconstruct an admissible control and integrate it densely.
    Reconstruct,
    /// Compare Lax values with the grid oracle at probe states.
    Verify(VerifyArgs),
    /// Convexity audit of the candidate transcriptions.
    Audit,
    /// Solve the augmented HJ equation on a grid and export it.
    Oracle(OracleArgs),
}

#[derive(Debug, Clone, Args)]
pub struct GridFlags {
    /// Spatial step of the oracle grid.
    #[arg(long, default_value_t = 0.01)]
    pub dx: f64,
    /// Step of the auxiliary z axis; defaults to dx.
    #[arg(long)]
    pub dz: Option<f64>,
    /// Lower corner of the spatial box (every axis).
    #[arg(long, default_value_t = -2.5, allow_hyphen_values = true)]
    pub lo: f64,
    #[arg(long, default_value_t = 2.5, allow_hyphen_values = true)]
    pub hi: f64,
    /// v1, w1, v2, v1_ti, v2_ti or w2_ti; chosen from the problem class when omitted.
    #[arg(long)]
    pub kind: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    /// Shorthand for the builtin toys: 1d or drift.
    #[arg(long)]
    pub toy: Option<String>,
    #[command(flatten)]
    pub grid: GridFlags,
    #[arg(long, default_value_t = 20)]
    pub probes: usize,
    #[arg(long = "probe-lo", default_value_t = -1.5, allow_hyphen_values = true)]
    pub probe_lo: f64,
    #[arg(long = "probe-hi", default_value_t = 1.5, allow_hyphen_values = true)]
    pub probe_hi: f64,
}

#[derive(Debug, Clone, Args)]
pub struct OracleArgs {
    #[command(flatten)]
    pub grid: GridFlags,
}

impl GridFlags {
    fn resolve(&self) -> Result<GridArgs> {
        let kind = match &self.kind {
            None => None,
            Some(k) => Some(
                serde_json::from_value::<HjKind>(json!(k))
                    .with_context(|| format!("--kind: unknown oracle '{k}'"))?,
            ),
        };
        Ok(GridArgs { dx: self.dx, dz: self.dz.unwrap_or(self.dx), lo: self.lo, hi: self.hi, kind })
    }
}

/// Config from `--config` and/or `--scenario`, with flag overrides applied.
pub fn resolve_config(common: &Common, scenario_alias: Option<&str>) -> Result<RunConfig> {
    let scenario = common.scenario.as_deref().or(scenario_alias);
    let mut cfg = match (&common.config, scenario) {
        (Some(path), _) => RunConfig::read(path)?,
        (None, Some(name)) => RunConfig::builtin(name, 1, None),
        (None, None) => bail!("either --scenario or --config is required"),
    };
    if let (Some(_), Some(name)) = (&common.config, scenario) {
        let robots = match &cfg.scenario {
            ScenarioConfig::Builtin { robots, .. } => *robots,
            ScenarioConfig::Declarative { .. } => 1,
        };
        cfg.scenario = ScenarioConfig::Builtin { name: name.to_string(), robots };
    }
    if let Some(r) = common.robots {
        match &mut cfg.scenario {
            ScenarioConfig::Builtin { robots, .. } => *robots = r,
            ScenarioConfig::Declarative { .. } => bail!("--robots only applies to builtin scenarios"),
        }
    }
    if let Some(dt) = common.dt {
        cfg.grid.dt = Some(dt);
        cfg.grid.steps = None;
    }
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    if let Some(m) = common.max_iter {
        cfg.solver.max_iter = m;
    }
    if let Some(t) = common.tol {
        cfg.solver.tol = t;
    }
    if let Some(o) = &common.out {
        cfg.output = Some(o.clone());
    }
    Ok(cfg)
}

pub fn output_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn toy_name(alias: &str) -> Result<&'static str> {
    Ok(match alias {
        "1d" => "toy_1d",
        "drift" => "toy_drift",
        other => bail!("--toy: unknown toy '{other}', expected 1d or drift"),
    })
}

pub fn dispatch(cli: &Cli) -> Result<serde_json::Value> {
    let alias = match &cli.command {
        Command::Verify(v) => v.toy.as_deref().map(toy_name).transpose()?,
        _ => None,
    };
    let cfg = resolve_config(&cli.common, alias)?;
    let out = output_dir(&cfg);
    let verbose = cli.common.verbose;
    match &cli.command {
        Command::Solve => commands::solve_command(Run::new("solve", cfg, &out, verbose)?),
        Command::Reconstruct => commands::reconstruct_command(Run::new("reconstruct", cfg, &out, verbose)?),
        Command::Audit => commands::audit_command(Run::new("audit", cfg, &out, verbose)?),
        Command::Oracle(o) => commands::oracle_command(Run::new("oracle", cfg, &out, verbose)?, &o.grid.resolve()?),
        Command::Verify(v) => commands::verify_command(
            Run::new("verify", cfg, &out, verbose)?,
            &v.grid.resolve()?,
            v.probes,
            (v.probe_lo, v.probe_hi),
        ),
    }
}

fn error_json(err: &anyhow::Error) -> String {
    let chain: Vec<String> = err.chain().map(|e| e.to_string()).collect();
    json!({ "error": { "message": chain.join(": "), "causes": chain } }).to_string()
}

/// A closed pipe (`laxoc ... | head`) is not worth a panic.
fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{text}");
}

/// Runs the CLI and returns the process exit code. Failures print a JSON
/// object `{"error": {...}}` on stdout and exit nonzero.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            emit(&error_json(&anyhow::anyhow!(e.to_string().trim().to_string())));
            return 2;
        }
    };
    match dispatch(&cli) {
        Ok(summary) => {
            emit(&serde_json::to_string_pretty(&summary).unwrap_or_default());
            0
        }
        Err(e) => {
            emit(&error_json(&e));
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("laxoc").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_build_a_builtin_config() {
        let cli = parse(&["solve", "--scenario", "example_a", "--robots", "3", "--dt", "0.1", "--seed", "7"]);
        let cfg = resolve_config(&cli.common, None).unwrap();
        assert_eq!(cfg.scenario, ScenarioConfig::Builtin { name: "example_a".into(), robots: 3 });
        assert_eq!(cfg.grid.dt, Some(0.1));
        assert_eq!(cfg.seed, Some(7));
    }

    #[test]
    fn toy_alias_and_grid_flags() {
        let cli = parse(&["verify", "--toy", "1d", "--dx", "0.02", "--lo", "-3"]);
        let Command::Verify(v) = &cli.command else { panic!() };
        let g = v.grid.resolve().unwrap();
        assert_eq!((g.dx, g.dz, g.lo), (0.02, 0.02, -3.0));
        assert_eq!(toy_name("1d").unwrap(), "toy_1d");
        assert!(toy_name("3d").is_err());
    }

    #[test]
    fn missing_scenario_is_an_error() {
        let cli = parse(&["audit"]);
        assert!(resolve_config(&cli.common, None).is_err());
    }

    #[test]
    fn unknown_oracle_kind() {
        let g = GridFlags { dx: 0.1, dz: None, lo: -1.0, hi: 1.0, kind: Some("v9".into()) };
        assert!(g.resolve().is_err());
        let g = GridFlags { kind: Some("w2_ti".into()), ..g };
        assert_eq!(g.resolve().unwrap().kind, Some(HjKind::W2Ti));
    }
}
