//! Property tests for the invariants of each module.

use laxoc_core::hamiltonian::{eval_h, eval_h_star, eval_hbar, eval_hbar_w, eval_hbar_w_ti, ControlImageSet};
use laxoc_core::lax_transcription::build_phi2_subprogram;
use laxoc_core::reconstruction::decompose_step;
use laxoc_core::scenarios::{self, example_a, example_b, toy_lq, toy_nonzero_l_minmin};
use laxoc_core::{
    build_phi1_program, evaluate_problem_value, evaluate_running_objective, integrate_dynamics, DecompositionMode,
    PiecewiseControl, ProblemClass, ProblemInstance, TimeGrid,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_control(inst: &ProblemInstance, r: &mut ChaCha8Rng) -> Vec<f64> {
    let samples = inst.model.control_set().samples(7);
    samples[r.gen_range(0..samples.len())].clone()
}

/// Instances of every builtin with a single robot.
fn builtins() -> Vec<ProblemInstance> {
    scenarios::BUILTIN_NAMES.iter().map(|n| scenarios::builtin(n, 1, 3).unwrap()).collect()
}

fn point(r: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(-scale..scale)).collect()
}

/// Velocity image points `-f(s,x,a)` mixed with random weights.
fn domain_point(inst: &ProblemInstance, s: f64, x: &[f64], r: &mut ChaCha8Rng) -> Vec<f64> {
    let n = inst.n();
    let mut b = vec![0.0; n];
    let mut f = vec![0.0; n];
    let w: f64 = r.gen_range(0.0..1.0);
    for wt in [w, 1.0 - w] {
        let a = random_control(inst, r);
        inst.model.dynamics(s, x, &a, &mut f);
        for j in 0..n {
            b[j] -= wt * f[j];
        }
    }
    b
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rk4_error_drops_by_eight_when_substeps_double(seed in any::<u64>()) {
        let inst = example_a(1, seed % 50).unwrap();
        let mut r = rng(seed);
        let bps = vec![0.0, 0.7, 1.3, inst.horizon];
        let vals: Vec<Vec<f64>> = (0..3).map(|_| random_control(&inst, &mut r)).collect();
        let ctl = PiecewiseControl::new(bps.clone(), vals).unwrap();
        let end = |sub: usize| integrate_dynamics(&inst, &ctl, &inst.x0, sub, &bps).unwrap().states.last().unwrap().clone();
        let reference = end(40);
        let err = |sub: usize| end(sub).iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let (e1, e2) = (err(1), err(2));
        // Below roundoff the ratio is noise.
        prop_assume!(e1 > 1e-11);
        prop_assert!(e1 >= 8.0 * e2, "e1 = {e1:e}, e2 = {e2:e}");
    }

    #[test]
    fn refinement_moves_values_the_right_way(seed in any::<u64>()) {
        // Same continuous trajectory, J evaluated on a grid and on its refinement.
        let inst = toy_lq(0.5).unwrap();
        let mut r = rng(seed);
        let fine = TimeGrid::uniform(1.0, 0.125).unwrap();
        let coarse = TimeGrid::uniform(1.0, 0.25).unwrap();
        let vals: Vec<Vec<f64>> = (0..8).map(|_| vec![r.gen_range(-1.0..1.0)]).collect();
        let ctl = PiecewiseControl::new(fine.nodes().to_vec(), vals).unwrap();
        let traj = integrate_dynamics(&inst, &ctl, &inst.x0, 4, fine.nodes()).unwrap();
        let jc = evaluate_running_objective(&inst, &traj, &ctl, &coarse).unwrap();
        let jf = evaluate_running_objective(&inst, &traj, &ctl, &fine).unwrap();
        let last_c = Some(coarse.steps());
        let last_f = Some(fine.steps());
        let maxc = evaluate_problem_value(ProblemClass::MinMax, &jc, last_c).value;
        let maxf = evaluate_problem_value(ProblemClass::MinMax, &jf, last_f).value;
        let minc = evaluate_problem_value(ProblemClass::MinMin, &jc, last_c).value;
        let minf = evaluate_problem_value(ProblemClass::MinMin, &jf, last_f).value;
        prop_assert!(maxf >= maxc - 1e-12);
        prop_assert!(minf <= minc + 1e-12);
        prop_assert!(maxc >= jc[0] && minc <= jc[0]);
    }

    #[test]
    fn minmax_value_dominates_the_first_node(j in prop::collection::vec(-5.0f64..5.0, 1..30)) {
        let last = Some(j.len() - 1);
        prop_assert!(evaluate_problem_value(ProblemClass::MinMax, &j, last).value >= j[0]);
        prop_assert!(evaluate_problem_value(ProblemClass::MinMin, &j, last).value <= j[0]);
    }

    #[test]
    fn hamiltonian_is_convex_in_p(seed in any::<u64>()) {
        let mut r = rng(seed);
        for inst in builtins() {
            let n = inst.n();
            let s = r.gen_range(0.0..inst.horizon);
            let x = point(&mut r, n, 2.0);
            for _ in 0..20 {
                let p1 = point(&mut r, n, 3.0);
                let p2 = point(&mut r, n, 3.0);
                let mid: Vec<f64> = p1.iter().zip(&p2).map(|(a, b)| 0.5 * (a + b)).collect();
                let h = |p: &[f64]| eval_h(&inst, s, &x, p).unwrap();
                prop_assert!(h(&mid) <= 0.5 * (h(&p1) + h(&p2)) + 1e-9, "{}", inst.name);
            }
        }
    }

    #[test]
    fn fenchel_young(seed in any::<u64>()) {
        let mut r = rng(seed);
        for inst in builtins() {
            let n = inst.n();
            let s = r.gen_range(0.0..inst.horizon);
            let x = point(&mut r, n, 2.0);
            for _ in 0..10 {
                let b = domain_point(&inst, s, &x, &mut r);
                let hs = eval_h_star(&inst, s, &x, &b).unwrap();
                prop_assert!(hs.is_finite(), "{}: image point outside the domain", inst.name);
                let p = point(&mut r, n, 3.0);
                let pb: f64 = p.iter().zip(&b).map(|(a, c)| a * c).sum();
                prop_assert!(pb <= eval_h(&inst, s, &x, &p).unwrap() + hs + 1e-6, "{}", inst.name);
            }
        }
    }

    #[test]
    fn primal_and_conjugate_hamiltonians_agree_for_nonpositive_q(seed in any::<u64>()) {
        let mut r = rng(seed);
        for inst in builtins() {
            let n = inst.n();
            for _ in 0..20 {
                let s = r.gen_range(0.0..inst.horizon);
                let x = point(&mut r, n, 2.0);
                let p = point(&mut r, n, 3.0);
                let q = r.gen_range(-2.0..=0.0);
                let a = eval_hbar(&inst, s, &x, 0.0, &p, q).unwrap().0;
                let w = eval_hbar_w(&inst, s, &x, 0.0, &p, q).unwrap();
                prop_assert!((a - w).abs() <= 1e-6, "{}: {a} vs {w}", inst.name);
                if inst.time_invariant {
                    let wti = eval_hbar_w_ti(&inst, &x, 0.0, &p, q).unwrap();
                    prop_assert!((a.max(0.0) - wti).abs() <= 1e-6, "{}", inst.name);
                }
            }
        }
    }

    #[test]
    fn decomposition_witnesses_lie_in_the_hull(seed in any::<u64>()) {
        let mut r = rng(seed);
        for inst in [example_a(1, seed % 50).unwrap(), example_b(1, seed % 50).unwrap(), toy_nonzero_l_minmin(0.5).unwrap()] {
            let n = inst.n();
            let s = r.gen_range(0.0..inst.horizon);
            let x = point(&mut r, n, 2.0);
            let b = domain_point(&inst, s, &x, &mut r);
            let hs = eval_h_star(&inst, s, &x, &b).unwrap();
            let step = decompose_step(&inst, s, &x, &b, hs, None, DecompositionMode::ExactSumOne).unwrap();
            prop_assert!(step.residual <= 1e-6);
            prop_assert!((step.weight_sum() - 1.0).abs() <= 1e-9);
            let hull = ControlImageSet::new(&inst, s, &x, false).unwrap();
            for (atom, beta) in step.atoms.iter().zip(&step.betas) {
                prop_assert!(inst.model.control_set().contains(&atom.control, 0.0), "atom outside A");
                prop_assert!(hull.contains(beta).1 <= 1e-9);
            }
        }
    }

    #[test]
    fn terminal_norm_split_reproduces_the_terminal_cost(seed in any::<u64>()) {
        let mut r = rng(seed);
        for inst in [example_a(2, seed % 50).unwrap(), example_b(2, seed % 50).unwrap(), scenarios::toy_squared_input().unwrap()] {
            let n = inst.n();
            let s = r.gen_range(0.0..inst.horizon);
            let Some(terms) = inst.model.terminal_norms(s) else { continue };
            let x = point(&mut r, n, 3.0);
            let mut g = vec![0.0; n];
            let mut total = inst.model.terminal_smooth(s, &x, &mut g);
            for t in &terms {
                total += t.weight * t.residual(&x).iter().map(|v| v * v).sum::<f64>().sqrt();
            }
            let direct = inst.model.terminal_cost(s, &x);
            prop_assert!((total - direct).abs() <= 1e-12 * (1.0 + direct.abs()), "{}: {total} vs {direct}", inst.name);
        }
    }

    #[test]
    fn epigraph_objective_is_the_running_max(seed in any::<u64>()) {
        let inst = example_a(2, seed % 50).unwrap();
        let grid = TimeGrid::uniform(inst.horizon, 0.25).unwrap();
        let p = build_phi1_program(&inst, &grid).unwrap();
        let mut r = rng(seed);
        let w: Vec<Vec<f64>> = (0..p.steps()).map(|k| p.project(k, &point(&mut r, p.control_dim(), 3.0))).collect();
        let xs = p.propagate(&w);
        let curve = p.cost_curve(&xs, &w, 0.0).unwrap();
        let max = curve.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(p.objective_value(&curve), max);
    }

    #[test]
    fn constraint_windows_only_grow(seed in any::<u64>()) {
        // A point feasible for terminal index k'+1 is feasible for k'.
        let inst = toy_nonzero_l_minmin(0.5).unwrap();
        let grid = TimeGrid::uniform(1.0, 0.1).unwrap();
        let mut r = rng(seed);
        let progs: Vec<_> = (0..=grid.steps()).map(|k| build_phi2_subprogram(&inst, &grid, k).unwrap()).collect();
        let w: Vec<Vec<f64>> = (0..grid.steps()).map(|k| progs[0].project(k, &[r.gen_range(-1.5..1.5)])).collect();
        let xs = progs[0].propagate(&w);
        let feasible: Vec<bool> = progs
            .iter()
            .map(|p| p.constraint_values(&xs).iter().flatten().all(|c| *c <= 0.0))
            .collect();
        for k in 0..grid.steps() {
            prop_assert!(!feasible[k + 1] || feasible[k]);
        }
    }

    #[test]
    fn audited_convex_program_passes_midpoint_checks(seed in any::<u64>()) {
        let inst = example_a(1, seed % 50).unwrap();
        let grid = TimeGrid::uniform(inst.horizon, 0.25).unwrap();
        let p = build_phi1_program(&inst, &grid).unwrap();
        let mut r = rng(seed);
        let f = |w: &[Vec<f64>]| {
            let xs = p.propagate(w);
            (p.objective_value(&p.cost_curve(&xs, w, 0.0).unwrap()), p.constraint_values(&xs))
        };
        for _ in 0..20 {
            let w1: Vec<Vec<f64>> = (0..p.steps()).map(|k| p.project(k, &point(&mut r, p.control_dim(), 3.0))).collect();
            let w2: Vec<Vec<f64>> = (0..p.steps()).map(|k| p.project(k, &point(&mut r, p.control_dim(), 3.0))).collect();
            let mid: Vec<Vec<f64>> =
                w1.iter().zip(&w2).map(|(a, b)| a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect()).collect();
            for k in 0..p.steps() {
                prop_assert!(p.membership_margin(k, &mid[k]) <= 1e-9);
            }
            let ((o1, c1), (o2, c2), (om, cm)) = (f(&w1), f(&w2), f(&mid));
            prop_assert!(om <= 0.5 * (o1 + o2) + 1e-9);
            for k in 0..cm.len() {
                for j in 0..cm[k].len() {
                    prop_assert!(cm[k][j] <= 0.5 * (c1[k][j] + c2[k][j]) + 1e-9);
                }
            }
        }
    }
}
