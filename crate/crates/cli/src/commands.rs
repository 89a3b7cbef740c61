//! The five commands. Each returns a JSON summary and leaves its artifacts
//! plus a `manifest.json` in the output directory.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use laxoc_core::convex_solver::solve_phi2_sweep;
use laxoc_core::hj_oracle::{check_z_regularity, extract_theta, solve_hj, HjGrids, HjKind};
use laxoc_core::lax_transcription::build_phi2_subprogram;
use laxoc_core::{
    audit_convexity, build_phi1_program, build_phi2ti_program, solve, solve_and_reconstruct, ConvexProgram,
    PipelineResult, ProblemClass, ProblemInstance, ProgramKind, Solution, TimeGrid,
};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::artifacts::{cost_curve_csv, cost_svg, trajectory_csv, trajectory_svg, ArtifactSink};
use crate::config::{load_instance, RunConfig};

/// Which transcription a problem is solved with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Plan {
    Phi1,
    /// Freezing form for time-invariant MinMin problems without running cost.
    Phi2Ti,
    /// One fixed-endpoint program per terminal index.
    Phi2Sweep,
}

pub fn plan_for(inst: &ProblemInstance) -> Plan {
    match inst.class {
        ProblemClass::MinMax => Plan::Phi1,
        ProblemClass::MinMin if inst.time_invariant && inst.model.structure().stage.zero => Plan::Phi2Ti,
        ProblemClass::MinMin => Plan::Phi2Sweep,
    }
}

/// Shared state of one command invocation.
pub struct Run {
    pub cfg: RunConfig,
    pub verbose: bool,
    sink: ArtifactSink,
    command: &'static str,
    timings: BTreeMap<String, f64>,
    started: Instant,
}

impl Run {
    pub fn new(command: &'static str, cfg: RunConfig, out: &Path, verbose: bool) -> Result<Self> {
        Ok(Run {
            cfg,
            verbose,
            sink: ArtifactSink::new(out)?,
            command,
            timings: BTreeMap::new(),
            started: Instant::now(),
        })
    }

    fn time<T>(&mut self, label: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let r = f();
        self.timings.insert(label.to_string(), t.elapsed().as_secs_f64());
        r
    }

    /// Writes the manifest last so it can list every other artifact.
    fn finish(mut self, inst: Option<&ProblemInstance>, extra: Value) -> Result<Value> {
        self.timings.insert("total".into(), self.started.elapsed().as_secs_f64());
        let unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let manifest = json!({
            "command": self.command,
            "config": self.cfg,
            "config_hash": self.cfg.hash(),
            "seed": self.cfg.seed,
            "versions": {
                "laxoc-core": laxoc_core::VERSION,
                "laxoc-cli": env!("CARGO_PKG_VERSION"),
            },
            "instance_metadata": inst.map(|i| json!(i.metadata)),
            "files": self.sink.digests(),
            "wall_time_seconds": self.timings,
            "finished_unix": unix,
            "details": extra,
        });
        self.sink.write_json("manifest.json", &manifest)?;
        Ok(json!({
            "command": self.command,
            "out": self.sink.dir().display().to_string(),
            "details": manifest["details"].clone(),
        }))
    }
}

fn control_prefix(kind: &ProgramKind) -> &'static str {
    if kind.is_lax() {
        "beta"
    } else {
        "a"
    }
}

/// Column pairs drawn in the trajectory plane.
pub fn plane_pairs(inst: &ProblemInstance) -> Vec<(usize, usize)> {
    let robots = inst.metadata.get("robots").and_then(Value::as_u64).unwrap_or(1) as usize;
    match inst.name.as_str() {
        "example_a" => (0..robots).map(|r| (4 * r, 4 * r + 2)).collect(),
        "example_b" => (0..robots).map(|r| (2 * r, 2 * r + 1)).collect(),
        _ if inst.n() >= 2 => vec![(0, 1)],
        _ => Vec::new(),
    }
}

fn solution_summary(sol: &Solution) -> Value {
    json!({
        "status": sol.status,
        "converged": sol.converged,
        "label": sol.label,
        "value": sol.value,
        "k_star": sol.k_star,
        "iterations": sol.iterations,
        "message": sol.message,
    })
}

fn single_program(inst: &ProblemInstance, grid: &TimeGrid, plan: Plan) -> Result<ConvexProgram> {
    match plan {
        Plan::Phi1 => build_phi1_program(inst, grid).context("building the MinMax program"),
        Plan::Phi2Ti => build_phi2ti_program(inst, grid).context("building the freezing MinMin program"),
        Plan::Phi2Sweep => unreachable!("sweeps build one program per terminal index"),
    }
}

pub fn solve_command(mut run: Run) -> Result<Value> {
    let (inst, grid) = load_instance(&run.cfg)?;
    let plan = plan_for(&inst);
    let opts = run.cfg.solver.options(run.verbose);
    let (sol, sweep) = run.time("solve", || match plan {
        Plan::Phi2Sweep => {
            let s = solve_phi2_sweep(&inst, &grid, &opts)?;
            Ok((s.solution, Some((s.k_star, s.values))))
        }
        _ => Ok((solve(&single_program(&inst, &grid, plan)?, &opts)?, None)),
    })?;
    run.sink.write_json("solution.json", &sol)?;
    run.sink.write("trajectory.csv", trajectory_csv(&sol.times, &sol.states, &sol.controls, control_prefix(&sol.kind)).as_bytes())?;
    run.sink.write("cost_curve.csv", cost_curve_csv(&sol.times, &sol.cost_curve).as_bytes())?;
    if let Some((k, values)) = &sweep {
        run.sink.write_json("sweep.json", &json!({ "k_star": k, "values": values }))?;
    }
    let mut details = solution_summary(&sol);
    details["plan"] = json!(plan);
    run.finish(Some(&inst), details)
}

/// Solve plus reconstruction for the planned transcription.
pub fn pipeline(inst: &ProblemInstance, grid: &TimeGrid, cfg: &RunConfig, verbose: bool) -> Result<(Plan, PipelineResult)> {
    let plan = plan_for(inst);
    let opts = cfg.solver.options(verbose);
    let program = match plan {
        Plan::Phi2Sweep => {
            let s = solve_phi2_sweep(inst, grid, &opts)?;
            let k = s.k_star.context("every terminal index is infeasible")?;
            build_phi2_subprogram(inst, grid, k)?
        }
        _ => single_program(inst, grid, plan)?,
    };
    Ok((plan, solve_and_reconstruct(&program, &opts, &cfg.reconstruction)?))
}

pub fn reconstruct_command(mut run: Run) -> Result<Value> {
    let (inst, grid) = load_instance(&run.cfg)?;
    let (cfg, verbose) = (run.cfg.clone(), run.verbose);
    let (plan, res) = run.time("solve_and_reconstruct", || pipeline(&inst, &grid, &cfg, verbose))?;
    let r = &res.reconstruction;
    run.sink.write_json("solution.json", &res.solution)?;
    run.sink.write_json("control.json", &r.control)?;
    let traj = trajectory_csv(&r.dense.times, &r.dense.states, &r.dense.controls, "a");
    run.sink.write("trajectory.csv", traj.as_bytes())?;
    let curve = cost_curve_csv(grid.nodes(), &r.cost_curve);
    run.sink.write("cost_curve.csv", curve.as_bytes())?;
    let summary = json!({
        "plan": plan,
        "mode": r.mode,
        "value": r.value.value,
        "k_star": r.value.k_star,
        "tau_star": r.tau_star,
        "lax_value": res.solution.value,
        "tracking_error": r.tracking_error,
        "feasibility": r.feasibility,
        "sigma_end": r.sigma_end,
        "cost_at_sigma_end": r.cost_at_sigma_end,
        "frozen_steps": r.frozen_steps,
        "max_identity_residual": r.max_identity_residual,
        "constraint_margin": res.margin,
        "backoff_rounds": res.backoff_rounds,
        "solver": solution_summary(&res.solution),
    });
    run.sink.write_json("reconstruction.json", &summary)?;
    // Figures are rendered from the CSV text already written above.
    let pairs = plane_pairs(&inst);
    run.sink.write("trajectory.svg", trajectory_svg(&traj, &pairs, &format!("{} trajectories", inst.name))?.as_bytes())?;
    run.sink.write("cost.svg", cost_svg(&curve, r.value.k_star, "cost versus terminal time")?.as_bytes())?;
    run.finish(Some(&inst), summary)
}

pub fn audit_command(mut run: Run) -> Result<Value> {
    let (inst, _) = load_instance(&run.cfg)?;
    let report = audit_convexity(&inst);
    run.sink.write_json("audit.json", &report)?;
    let verdicts: BTreeMap<String, bool> = report.columns.iter().map(|c| (c.column.clone(), c.convex)).collect();
    run.finish(Some(&inst), json!({ "convex": verdicts }))
}

/// Grid settings shared by `verify` and `oracle`.
#[derive(Debug, Clone, Serialize)]
pub struct GridArgs {
    pub dx: f64,
    pub dz: f64,
    pub lo: f64,
    pub hi: f64,
    pub kind: Option<HjKind>,
}

fn hj_setup(inst: &ProblemInstance, g: &GridArgs) -> Result<(HjKind, HjGrids)> {
    let n = inst.n();
    if n > 2 {
        bail!("the grid oracle handles at most two states, '{}' has {n}", inst.name);
    }
    let kind = g.kind.unwrap_or(match plan_for(inst) {
        Plan::Phi1 => HjKind::V1,
        Plan::Phi2Ti => HjKind::W2Ti,
        Plan::Phi2Sweep => HjKind::V2,
    });
    Ok((kind, HjGrids::new(vec![g.lo; n], vec![g.hi; n], vec![g.dx; n], g.dz)))
}

pub fn oracle_command(mut run: Run, g: &GridArgs) -> Result<Value> {
    let (inst, _) = load_instance(&run.cfg)?;
    let (kind, grids) = hj_setup(&inst, g)?;
    let vf = run.time("hj", || Ok(solve_hj(&inst, kind, &grids)?))?;
    run.sink.write("oracle.bin", &vf.to_binary())?;
    run.sink.write_json("oracle_header.json", &vf.header())?;
    run.sink.write("oracle_t0.csv", vf.csv_slice(0).as_bytes())?;
    let report = check_z_regularity(&vf, 1e-3);
    run.sink.write_json("z_regularity.json", &report)?;
    run.finish(Some(&inst), json!({ "kind": kind, "grid": g, "z_regularity_passed": report.passed }))
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeRow {
    pub x: Vec<f64>,
    pub lax: f64,
    pub oracle: f64,
    pub diff: f64,
    pub lax_converged: bool,
    pub note: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub instance: String,
    pub kind: HjKind,
    pub plan: Plan,
    pub grid: GridArgs,
    pub probes: Vec<ProbeRow>,
    pub max_diff: f64,
}

/// Lax values against the grid oracle at evenly spaced probe states on the
/// diagonal of `[probe_lo, probe_hi]^n`.
pub fn verify_probes(
    inst: &ProblemInstance,
    grid: &TimeGrid,
    cfg: &RunConfig,
    g: &GridArgs,
    probes: usize,
    probe_range: (f64, f64),
) -> Result<VerifyReport> {
    let (kind, grids) = hj_setup(inst, g)?;
    let plan = plan_for(inst);
    let vf = solve_hj(inst, kind, &grids)?;
    let opts = cfg.solver.options(false);
    let points: Vec<Vec<f64>> = (0..probes)
        .map(|i| {
            let f = if probes > 1 { i as f64 / (probes - 1) as f64 } else { 0.5 };
            vec![probe_range.0 + f * (probe_range.1 - probe_range.0); inst.n()]
        })
        .collect();
    // Probes fan out; collect keeps probe order.
    let rows: Vec<Result<ProbeRow>> = points
        .into_par_iter()
        .map(|x| {
            let mut local = inst.clone();
            local.x0 = x.clone();
            let sol = match plan {
                Plan::Phi2Sweep => solve_phi2_sweep(&local, grid, &opts)?.solution,
                _ => solve(&single_program(&local, grid, plan)?, &opts)?,
            };
            let theta = extract_theta(&vf, 0.0, &x)?;
            Ok(ProbeRow {
                diff: (sol.value - theta.value).abs(),
                x,
                lax: sol.value,
                oracle: theta.value,
                lax_converged: sol.converged,
                note: theta.note,
            })
        })
        .collect();
    let probes = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let max_diff = probes.iter().map(|p| p.diff).fold(0.0, f64::max);
    Ok(VerifyReport { instance: inst.name.clone(), kind, plan, grid: g.clone(), probes, max_diff })
}

pub fn verify_command(mut run: Run, g: &GridArgs, probes: usize, probe_range: (f64, f64)) -> Result<Value> {
    let (inst, grid) = load_instance(&run.cfg)?;
    let cfg = run.cfg.clone();
    let report = run.time("verify", || verify_probes(&inst, &grid, &cfg, g, probes, probe_range))?;
    run.sink.write_json("verify.json", &report)?;
    run.finish(Some(&inst), json!({ "kind": report.kind, "max_diff": report.max_diff, "probes": report.probes.len() }))
}
