//! End-to-end checks across transcription, solver, reconstruction and the
//! grid oracle.

use laxoc_core::hj_oracle::{extract_theta, solve_hj};
use laxoc_core::scenarios::{example_a, example_b, toy_1d, toy_lq, toy_minmax, Toy1d};
use laxoc_core::{
    build_phi1_program, build_phi2ti_program, certify, reconstruct, solve, solve_and_reconstruct, DecompositionMode,
    HjGrids, HjKind, ProblemClass, ReconstructOptions, SolveStatus, SolverOptions, TimeGrid,
};

fn opts() -> SolverOptions {
    SolverOptions { max_iter: 100_000, ..SolverOptions::default() }
}

#[test]
fn identical_inputs_give_identical_solutions() {
    let inst = example_a(2, 5).unwrap();
    let grid = TimeGrid::uniform(inst.horizon, 0.25).unwrap();
    let p = build_phi1_program(&inst, &grid).unwrap();
    let a = solve(&p, &opts()).unwrap();
    let b = solve(&p, &opts()).unwrap();
    assert_eq!(a.value.to_bits(), b.value.to_bits());
    assert_eq!(a.states, b.states);
    assert_eq!(a.controls, b.controls);
    assert_eq!(a.cost_curve, b.cost_curve);
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn merit_never_increases_within_an_outer_round() {
    let inst = example_a(1, 2).unwrap();
    let grid = TimeGrid::uniform(inst.horizon, 0.2).unwrap();
    let sol = solve(&build_phi1_program(&inst, &grid).unwrap(), &opts()).unwrap();
    assert!(sol.log.len() > 10);
    for w in sol.log.windows(2) {
        if w[0].outer == w[1].outer {
            assert!(w[1].merit <= w[0].merit, "outer {}: {} -> {}", w[0].outer, w[0].merit, w[1].merit);
        }
    }
}

#[test]
fn different_starts_reach_the_same_value() {
    let inst = toy_lq(0.5).unwrap();
    let grid = TimeGrid::uniform(1.0, 0.1).unwrap();
    let p = build_phi1_program(&inst, &grid).unwrap();
    let base = opts();
    let values: Vec<f64> = [(false, 0), (true, 1), (true, 2)]
        .into_iter()
        .map(|(random_start, seed)| {
            let s = solve(&p, &SolverOptions { random_start, seed, ..base.clone() }).unwrap();
            assert!(s.converged);
            s.value
        })
        .collect();
    for v in &values[1..] {
        assert!((v - values[0]).abs() <= 10.0 * base.stat_tol, "{values:?}");
    }
}

#[test]
fn example_a_reconstruction_uses_admissible_atoms() {
    let inst = example_a(1, 7).unwrap();
    let grid = TimeGrid::uniform(inst.horizon, 0.2).unwrap();
    let p = build_phi1_program(&inst, &grid).unwrap();
    let sol = solve(&p, &opts()).unwrap();
    assert_eq!(sol.status, SolveStatus::Converged);
    let rep = certify(&p, &sol);
    assert!(rep.dynamics <= 1e-9 && rep.membership <= 1e-6, "{rep:?}");
    let r = reconstruct(&p, &sol, &ReconstructOptions::default()).unwrap();
    assert_eq!(r.mode, DecompositionMode::ExactSumOne);
    assert!(r.max_identity_residual <= 1e-6);
    let a_set = inst.model.control_set();
    for step in &r.decomposition.steps {
        assert!((step.weight_sum() - 1.0).abs() <= 1e-9);
        for atom in &step.atoms {
            assert!(a_set.contains(&atom.control, 0.0));
        }
    }
    // The schedule only ever plays atoms, never their averages.
    let atoms: Vec<&Vec<f64>> = r.decomposition.steps.iter().flat_map(|s| s.atoms.iter().map(|a| &a.control)).collect();
    for v in &r.control.values {
        assert!(atoms.contains(&v), "{v:?} is not an atom");
    }
    assert!(r.frozen_steps.is_empty());
    assert_eq!(r.dense.times.first(), Some(&0.0));
    assert!((r.dense.times.last().unwrap() - inst.horizon).abs() < 1e-12);
}

#[test]
fn example_b_freezing_keeps_the_cost_identity() {
    let inst = example_b(1, 7).unwrap();
    let grid = TimeGrid::uniform(inst.horizon, 0.1).unwrap();
    let p = build_phi2ti_program(&inst, &grid).unwrap();
    let res = solve_and_reconstruct(&p, &opts(), &ReconstructOptions::default()).unwrap();
    let r = &res.reconstruction;
    assert_eq!(r.mode, DecompositionMode::SubOne);
    let sigma = r.sigma_end.unwrap();
    assert!(sigma <= inst.horizon + 1e-12);
    assert!((r.cost_at_sigma_end.unwrap() - res.solution.value).abs() <= 1e-6);
    assert!(r.tracking_error <= 1e-6);
    // Steps with a weight deficit are exactly the frozen ones.
    let deficit: Vec<usize> = r
        .decomposition
        .steps
        .iter()
        .enumerate()
        .filter(|(_, s)| s.weight_sum() < 1.0 - 1e-9)
        .map(|(k, _)| k)
        .collect();
    assert_eq!(deficit, r.frozen_steps);
    assert_eq!(r.tau_star.is_some(), !r.value.infeasible);
}

#[test]
fn grid_oracle_respects_both_obstacles() {
    let inst = toy_minmax(0.0).unwrap();
    let vf = solve_hj(&inst, HjKind::V1, &HjGrids::new(vec![-2.5], vec![2.5], vec![0.05], 0.05)).unwrap();
    let tol = 1e-12;
    for (si, vals) in vf.values.iter().enumerate() {
        let t = vf.times[si];
        for (i, x) in vf.x_axes[0].iter().enumerate() {
            let c = inst.constraint_max(t, &[*x]);
            let g = inst.model.terminal_cost(t, &[*x]);
            for (l, z) in vf.z_axis.iter().enumerate() {
                let v = vals[i * vf.z_axis.len() + l];
                assert!(v >= c - tol && v >= g - z - tol, "t={t} x={x} z={z}: {v}");
            }
        }
    }
}

#[test]
fn grid_oracle_error_shrinks_with_the_step() {
    // Velocities in [1, 3]: the state cannot rest, so the value has kinks
    // that the scheme smears.
    let inst = toy_1d(Toy1d { drift: 2.0, ..Toy1d::default() }, ProblemClass::MinMax).unwrap();
    let grids = |h: f64| HjGrids::new(vec![-2.0], vec![2.0], vec![h], h);
    let probes = [-0.6, -0.2, 0.3, 0.7];
    let theta = |h: f64| {
        let vf = solve_hj(&inst, HjKind::V1, &grids(h)).unwrap();
        probes.iter().map(|x| extract_theta(&vf, 0.0, &[*x]).unwrap().value).collect::<Vec<_>>()
    };
    let reference = theta(0.0125);
    let errors: Vec<f64> = [0.1, 0.05, 0.025]
        .into_iter()
        .map(|h| theta(h).iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
        .collect();
    assert!(errors[0] > 1e-8, "coarsest grid already exact, the check says nothing");
    assert!(errors.windows(2).all(|w| w[1] <= w[0]), "{errors:?}");
}
