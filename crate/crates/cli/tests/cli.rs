//! Runs the `laxoc` binary end to end.

use std::path::Path;
use std::process::{Command, Output};

use anyhow::Result;
use laxoc_cli::artifacts::{cost_svg, read_cost_curve, trajectory_csv, trajectory_svg};
use laxoc_cli::commands::plane_pairs;
use laxoc_core::scenarios::example_b;
use laxoc_core::{
    evaluate_problem_value, evaluate_running_objective, integrate_dynamics, PiecewiseControl, ProblemClass, TimeGrid,
};
use serde_json::Value;

fn laxoc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_laxoc")).args(args).env_remove("LAXOC_OUT").output().unwrap()
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn runtime_errors_are_json_with_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let o = laxoc(&["solve", "--scenario", "example_b", "--out", out]);
    assert_eq!(o.status.code(), Some(1));
    let v = stdout_json(&o);
    assert!(v["error"]["message"].as_str().unwrap().contains("seed"));
    assert!(v["error"]["causes"].is_array());

    let o = laxoc(&["solve", "--scenario", "no_such_thing", "--out", out]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout_json(&o)["error"]["message"].as_str().unwrap().contains("no_such_thing"));
}

#[test]
fn usage_errors_are_json_with_exit_two() {
    let o = laxoc(&["solve", "--dt", "fast"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout_json(&o)["error"]["message"].is_string());
    let o = laxoc(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn bad_config_names_the_field() -> Result<()> {
    let tmp = tempfile::tempdir()?;
    let cfg = tmp.path().join("run.json");
    std::fs::write(&cfg, r#"{"schema_version": 1, "scenario": {"kind": "builtin", "name": "toy_lq"}, "grid": {"dtt": 0.1}}"#)?;
    let o = laxoc(&["solve", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout_json(&o)["error"]["message"].as_str().unwrap().contains("dtt"));
    Ok(())
}

#[test]
fn repeated_runs_are_byte_identical() -> Result<()> {
    let tmp = tempfile::tempdir()?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let o = laxoc(&["reconstruct", "--scenario", "example_b", "--robots", "1", "--seed", "3", "--out", dir.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    }
    let manifest: Value = serde_json::from_str(&read(&a, "manifest.json"))?;
    let files = manifest["files"].as_object().unwrap();
    assert!(files.contains_key("trajectory.csv") && files.contains_key("cost.svg"));
    for name in files.keys() {
        assert_eq!(std::fs::read(a.join(name))?, std::fs::read(b.join(name))?, "{name} differs");
    }
    let other: Value = serde_json::from_str(&read(&b, "manifest.json"))?;
    assert_eq!(manifest["files"], other["files"]);
    assert_eq!(manifest["config_hash"], other["config_hash"]);
    Ok(())
}

#[test]
fn emitted_cost_curve_reproduces_the_reported_value() -> Result<()> {
    let tmp = tempfile::tempdir()?;
    let dir = tmp.path();
    let o = laxoc(&["reconstruct", "--scenario", "example_b", "--robots", "1", "--seed", "3", "--out", dir.to_str().unwrap()]);
    assert!(o.status.success());
    let summary: Value = serde_json::from_str(&read(dir, "reconstruction.json"))?;
    let curve = read_cost_curve(&read(dir, "cost_curve.csv"))?;
    let upto = summary["feasibility"]["feasible_upto"].as_u64().map(|k| k as usize);
    let v = evaluate_problem_value(ProblemClass::MinMin, &curve, upto);
    assert_eq!(Some(v.value), summary["value"].as_f64());
    assert_eq!(v.k_star.map(|k| k as u64), summary["k_star"].as_u64());

    // Integrating the emitted control again gives the same curve, bit for bit.
    let inst = example_b(1, 3)?;
    let grid = TimeGrid::uniform(inst.horizon, 0.1)?;
    let control: PiecewiseControl = serde_json::from_str(&read(dir, "control.json"))?;
    let traj = integrate_dynamics(&inst, &control, &inst.x0, 10, grid.nodes())?;
    assert_eq!(evaluate_running_objective(&inst, &traj, &control, &grid)?, curve);
    assert_eq!(trajectory_csv(&traj.times, &traj.states, &traj.controls, "a"), read(dir, "trajectory.csv"));
    Ok(())
}

#[test]
fn figures_are_pure_renderings_of_the_csv() -> Result<()> {
    let tmp = tempfile::tempdir()?;
    let dir = tmp.path();
    let o = laxoc(&["reconstruct", "--scenario", "example_b", "--robots", "2", "--seed", "3", "--out", dir.to_str().unwrap()]);
    assert!(o.status.success());
    let summary: Value = serde_json::from_str(&read(dir, "reconstruction.json"))?;
    let pairs = plane_pairs(&example_b(2, 3)?);
    let traj = trajectory_svg(&read(dir, "trajectory.csv"), &pairs, "example_b trajectories")?;
    assert_eq!(traj, read(dir, "trajectory.svg"));
    let k = summary["k_star"].as_u64().map(|k| k as usize);
    assert_eq!(cost_svg(&read(dir, "cost_curve.csv"), k, "cost versus terminal time")?, read(dir, "cost.svg"));
    Ok(())
}

#[test]
fn out_flag_beats_the_environment() -> Result<()> {
    let tmp = tempfile::tempdir()?;
    let (env_dir, flag_dir) = (tmp.path().join("env"), tmp.path().join("flag"));
    let run = |extra: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_laxoc"))
            .args(["audit", "--scenario", "toy_lq"])
            .args(extra)
            .env("LAXOC_OUT", &env_dir)
            .output()
            .unwrap()
    };
    assert!(run(&[]).status.success());
    assert!(env_dir.join("audit.json").exists());
    assert!(run(&["--out", flag_dir.to_str().unwrap()]).status.success());
    assert!(flag_dir.join("audit.json").exists());
    Ok(())
}

#[test]
fn config_file_with_flag_overrides() -> Result<()> {
    let tmp = tempfile::tempdir()?;
    let cfg = tmp.path().join("run.json");
    std::fs::write(
        &cfg,
        r#"{"schema_version": 1, "scenario": {"kind": "builtin", "name": "toy_lq"}, "grid": {"steps": 5}}"#,
    )?;
    let out = tmp.path().join("o");
    let o = laxoc(&["solve", "--config", cfg.to_str().unwrap(), "--dt", "0.25", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let curve = read_cost_curve(&read(&out, "cost_curve.csv"))?;
    assert_eq!(curve.len(), 5, "--dt 0.25 replaces steps = 5");
    let manifest: Value = serde_json::from_str(&read(&out, "manifest.json"))?;
    assert_eq!(manifest["config"]["grid"]["dt"], 0.25);
    Ok(())
}

#[test]
fn declarative_scenario_solves() -> Result<()> {
    let tmp = tempfile::tempdir()?;
    let cfg = tmp.path().join("decl.json");
    std::fs::write(&cfg, std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/declarative_double_integrator.json"))?)?;
    let out = tmp.path().join("o");
    let o = laxoc(&["reconstruct", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let v = stdout_json(&o);
    assert!(v["details"]["value"].as_f64().is_some());
    Ok(())
}

#[test]
fn oracle_and_verify_on_a_coarse_grid() -> Result<()> {
    let tmp = tempfile::tempdir()?;
    let out = tmp.path().to_str().unwrap();
    let o = laxoc(&["oracle", "--scenario", "toy_1d", "--dx", "0.05", "--out", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let header: Value = serde_json::from_str(&read(tmp.path(), "oracle_header.json"))?;
    assert!(header.is_object());
    assert!(std::fs::metadata(tmp.path().join("oracle.bin"))?.len() > 0);
    let o = laxoc(&["verify", "--toy", "1d", "--dx", "0.05", "--probes", "5", "--out", out]);
    assert!(o.status.success());
    assert!(stdout_json(&o)["details"]["max_diff"].as_f64().unwrap() < 5e-2);
    // More than two states is refused.
    let o = laxoc(&["oracle", "--scenario", "example_b", "--robots", "2", "--seed", "1", "--out", out]);
    assert_eq!(o.status.code(), Some(1));
    Ok(())
}
