//! Turning a relaxed optimal pair `(x*, β*)` back into an admissible
//! piecewise-constant control for the original problem.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LaxError, Result};
use crate::hamiltonian::{lp_envelope, SAMPLE_PER_AXIS};
use crate::numerics::norm_inf;
use crate::convex_solver::{solve, Solution, SolveStatus, SolverOptions};
use crate::lax_transcription::{ConvexProgram, ProgramKind};
use crate::problem_model::{
    check_feasibility, evaluate_problem_value, evaluate_running_objective, integrate_dynamics, mat_vec,
    FeasibilityReport, ProblemClass, ProblemInstance, ProblemValue, TimeGrid, Trajectory,
};

/// Weights below this are dropped from schedules.
pub const ATOM_WEIGHT_FLOOR: f64 = 1e-12;

/// Tolerance of the decomposition identity.
pub const IDENTITY_TOL: f64 = 1e-6;

/// One admissible control with its share of a time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub control: Vec<f64>,
    pub weight: f64,
}

/// Piecewise-constant signal: `values[i]` holds on
/// `[breakpoints[i], breakpoints[i+1])`, and the last value also at the
/// right end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseControl {
    pub breakpoints: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl PiecewiseControl {
    pub fn new(breakpoints: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        if breakpoints.len() != values.len() + 1 || values.is_empty() {
            return Err(LaxError::Schedule("need one more breakpoint than values".into()));
        }
        if breakpoints.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(LaxError::Schedule("breakpoints must be strictly increasing".into()));
        }
        Ok(PiecewiseControl { breakpoints, values })
    }

    /// A single value on `[0, end]`.
    pub fn constant(end: f64, value: Vec<f64>) -> Self {
        PiecewiseControl { breakpoints: vec![0.0, end], values: vec![value] }
    }

    pub fn start(&self) -> f64 {
        self.breakpoints[0]
    }

    pub fn end(&self) -> f64 {
        self.breakpoints[self.breakpoints.len() - 1]
    }

    /// Index of the segment containing `t` (right-continuous).
    pub fn segment_at(&self, t: f64) -> usize {
        let i = self.breakpoints.partition_point(|&b| b <= t);
        i.saturating_sub(1).min(self.values.len() - 1)
    }

    pub fn value_at(&self, t: f64) -> Vec<f64> {
        self.values[self.segment_at(t)].clone()
    }

    fn push(bps: &mut Vec<f64>, vals: &mut Vec<Vec<f64>>, end: f64, value: Vec<f64>) {
        let start = *bps.last().unwrap();
        if end - start <= 1e-14 {
            return;
        }
        bps.push(end);
        vals.push(value);
    }
}

/// Whether weights must sum to one or may sum to less (freezing allowed).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecompositionMode {
    ExactSumOne,
    SubOne,
}

/// Atoms of one grid step and the velocity `-f(t_k, x[k], a_i)` of each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionStep {
    pub atoms: Vec<Atom>,
    pub betas: Vec<Vec<f64>>,
    /// Max of the velocity and cost identity residuals.
    pub residual: f64,
}

impl DecompositionStep {
    pub fn weight_sum(&self) -> f64 {
        self.atoms.iter().map(|a| a.weight).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub mode: DecompositionMode,
    pub steps: Vec<DecompositionStep>,
    /// Control used where a schedule is otherwise undefined.
    pub filler: Vec<f64>,
}

/// Splits `(hstar, -beta)` at `(s, x)` into admissible atoms.
///
/// The model's closed-form decomposer is used when declared; otherwise a
/// linear program over `candidates` (or a sample of `A`) finds a basic
/// solution, which has at most `n + 2` nonzero weights.
pub fn decompose_step(
    instance: &ProblemInstance,
    s: f64,
    x: &[f64],
    beta: &[f64],
    hstar_value: f64,
    candidates: Option<&[Vec<f64>]>,
    mode: DecompositionMode,
) -> Result<DecompositionStep> {
    let model = &instance.model;
    let n = instance.n();
    let with_zero = mode == DecompositionMode::SubOne;
    let velocity: Vec<f64> = beta.iter().map(|b| -b).collect();
    let closed = model.drift_matrix(s).and_then(|mm| {
        let mx = mat_vec(&mm, x);
        let u: Vec<f64> = velocity.iter().zip(&mx).map(|(v, m)| v - m).collect();
        model.decompose(s, x, &u, with_zero)
    });
    let atoms = match closed {
        Some(a) => a,
        None => {
            let owned;
            let cands: &[Vec<f64>] = match candidates {
                Some(c) => c,
                None => {
                    owned = model.control_set().samples(SAMPLE_PER_AXIS);
                    &owned
                }
            };
            let mut f = vec![0.0; n];
            let pts: Vec<Vec<f64>> = cands
                .iter()
                .map(|a| {
                    model.dynamics(s, x, a, &mut f);
                    f.clone()
                })
                .collect();
            let costs: Vec<f64> = cands.iter().map(|a| model.stage_cost(s, x, a)).collect();
            let (_, w) = lp_envelope(&pts, &costs, &velocity, !with_zero, 1e-10).ok_or(LaxError::Decomposition {
                step: 0,
                residual: f64::INFINITY,
            })?;
            cands
                .iter()
                .zip(w)
                .filter(|(_, w)| *w > ATOM_WEIGHT_FLOOR)
                .map(|(a, w)| Atom { control: a.clone(), weight: w })
                .collect()
        }
    };
    let atoms: Vec<Atom> = atoms.into_iter().filter(|a| a.weight > ATOM_WEIGHT_FLOOR).collect();
    let mut f = vec![0.0; n];
    let mut vsum = vec![0.0; n];
    let mut lsum = 0.0;
    let mut betas = Vec::with_capacity(atoms.len());
    for at in &atoms {
        model.dynamics(s, x, &at.control, &mut f);
        for i in 0..n {
            vsum[i] += at.weight * f[i];
        }
        lsum += at.weight * model.stage_cost(s, x, &at.control);
        betas.push(f.iter().map(|v| -v).collect());
    }
    let dv: Vec<f64> = vsum.iter().zip(&velocity).map(|(a, b)| a - b).collect();
    let mut residual = norm_inf(&dv);
    if hstar_value.is_finite() {
        residual = residual.max((lsum - hstar_value).abs());
    }
    let wsum: f64 = atoms.iter().map(|a| a.weight).sum();
    let weight_ok = match mode {
        DecompositionMode::ExactSumOne => (wsum - 1.0).abs() <= 1e-9,
        DecompositionMode::SubOne => wsum <= 1.0 + 1e-9,
    };
    if residual > IDENTITY_TOL || !weight_ok {
        return Err(LaxError::Decomposition { step: 0, residual: residual.max((wsum - 1.0).abs() * f64::from(!weight_ok)) });
    }
    Ok(DecompositionStep { atoms, betas, residual })
}

/// Decomposes every grid step, in parallel.
pub fn decompose_all(
    instance: &ProblemInstance,
    grid: &TimeGrid,
    states: &[Vec<f64>],
    betas: &[Vec<f64>],
    hstar: &[f64],
    mode: DecompositionMode,
) -> Result<Decomposition> {
    let steps: Vec<Result<DecompositionStep>> = (0..grid.steps())
        .into_par_iter()
        .map(|k| {
            decompose_step(instance, grid.nodes()[k], &states[k], &betas[k], hstar[k], None, mode).map_err(|e| match e {
                LaxError::Decomposition { residual, .. } => LaxError::Decomposition { step: k, residual },
                other => other,
            })
        })
        .collect();
    Ok(Decomposition {
        mode,
        steps: steps.into_iter().collect::<Result<Vec<_>>>()?,
        filler: instance.model.control_set().first_control(),
    })
}

/// Sub-interval schedule: on each `[t_k, t_{k+1})` the atoms follow each
/// other in order, atom `i` lasting `γ_i Δ_k`.
pub fn build_alpha_schedule_p1(decomp: &Decomposition, grid: &TimeGrid) -> Result<PiecewiseControl> {
    if decomp.steps.len() != grid.steps() {
        return Err(LaxError::Schedule("decomposition and grid lengths differ".into()));
    }
    let mut bps = vec![0.0];
    let mut vals: Vec<Vec<f64>> = Vec::new();
    for (k, step) in decomp.steps.iter().enumerate() {
        let wsum = step.weight_sum();
        if (wsum - 1.0).abs() > 1e-9 {
            return Err(LaxError::Schedule(format!("weights at step {k} sum to {wsum}, expected 1")));
        }
        let (t0, dt) = (grid.nodes()[k], grid.dt(k));
        let mut acc = 0.0;
        for (i, at) in step.atoms.iter().enumerate() {
            acc += at.weight;
            let end = if i + 1 == step.atoms.len() { grid.nodes()[k + 1] } else { t0 + acc * dt };
            PiecewiseControl::push(&mut bps, &mut vals, end, at.control.clone());
        }
    }
    PiecewiseControl::new(bps, vals)
}

/// Motion-then-freeze relaxed signal `β¹` and the time-compressed admissible
/// control `α^ε`, which runs the motion segments back to back and then
/// applies the filler on `[σ(T), T]`.
pub fn build_alpha_schedule_p2ti(decomp: &Decomposition, grid: &TimeGrid) -> Result<(PiecewiseControl, PiecewiseControl)> {
    if decomp.steps.len() != grid.steps() {
        return Err(LaxError::Schedule("decomposition and grid lengths differ".into()));
    }
    let n = decomp.steps.iter().find_map(|s| s.betas.first().map(Vec::len));
    let mut b_bps = vec![0.0];
    let mut b_vals: Vec<Vec<f64>> = Vec::new();
    let mut a_bps = vec![0.0];
    let mut a_vals: Vec<Vec<f64>> = Vec::new();
    let zero = vec![0.0; n.unwrap_or(0)];
    for (k, step) in decomp.steps.iter().enumerate() {
        let wsum = step.weight_sum();
        if wsum > 1.0 + 1e-9 {
            return Err(LaxError::Schedule(format!("weights at step {k} sum to {wsum} > 1")));
        }
        let (t0, t1, dt) = (grid.nodes()[k], grid.nodes()[k + 1], grid.dt(k));
        let mut acc = 0.0;
        for (at, b) in step.atoms.iter().zip(&step.betas) {
            acc += at.weight;
            let end = if (acc - 1.0).abs() <= 1e-12 { t1 } else { (t0 + acc * dt).min(t1) };
            let len = end - *b_bps.last().unwrap();
            PiecewiseControl::push(&mut b_bps, &mut b_vals, end, b.clone());
            if len > 1e-14 && norm_inf(b) > 0.0 {
                let a_end = *a_bps.last().unwrap() + len;
                PiecewiseControl::push(&mut a_bps, &mut a_vals, a_end, at.control.clone());
            }
        }
        PiecewiseControl::push(&mut b_bps, &mut b_vals, t1, zero.clone());
    }
    let horizon = grid.horizon();
    let sigma_end = *a_bps.last().unwrap();
    if horizon - sigma_end > 1e-14 {
        PiecewiseControl::push(&mut a_bps, &mut a_vals, horizon, decomp.filler.clone());
    } else if let Some(last) = a_bps.last_mut() {
        *last = horizon;
    }
    if b_vals.is_empty() {
        b_bps.push(horizon);
        b_vals.push(zero);
    }
    Ok((PiecewiseControl::new(b_bps, b_vals)?, PiecewiseControl::new(a_bps, a_vals)?))
}

/// `σ(s) = ∫_0^s 1{β¹(τ) ≠ 0} dτ`, exact for piecewise-constant `β¹`.
pub fn pseudo_time(beta1: &PiecewiseControl, s: f64) -> f64 {
    let mut acc = 0.0;
    for (i, v) in beta1.values.iter().enumerate() {
        let (a, b) = (beta1.breakpoints[i], beta1.breakpoints[i + 1]);
        if a >= s {
            break;
        }
        if norm_inf(v) > 0.0 {
            acc += b.min(s) - a;
        }
    }
    acc
}

/// Earliest `τ` with `σ(τ) = s`.
pub fn pseudo_time_inverse(beta1: &PiecewiseControl, s: f64) -> Result<f64> {
    let total = pseudo_time(beta1, beta1.end());
    if s > total + 1e-12 || s < 0.0 {
        return Err(LaxError::Range { value: s, lo: 0.0, hi: total });
    }
    let mut acc = 0.0;
    for (i, v) in beta1.values.iter().enumerate() {
        let (a, b) = (beta1.breakpoints[i], beta1.breakpoints[i + 1]);
        if s <= acc {
            return Ok(a);
        }
        if norm_inf(v) > 0.0 {
            if s <= acc + (b - a) {
                return Ok(a + (s - acc));
            }
            acc += b - a;
        }
    }
    Ok(beta1.end())
}

/// Maps the optimal index of a cost curve to its grid time.
pub fn select_terminal_time(j: &[f64], class: ProblemClass, feasible_upto: Option<usize>, grid: &TimeGrid) -> (Option<f64>, ProblemValue) {
    let v = evaluate_problem_value(class, j, feasible_upto);
    (v.k_star.map(|k| grid.nodes()[k]), v)
}

/// Knobs of the reconstruction pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructOptions {
    /// RK4 substeps per control segment.
    pub substeps: usize,
    /// Constraint tolerance used for feasibility windows.
    pub feas_tol: f64,
    /// Maximum number of constraint back-off rounds.
    pub max_backoff: usize,
}

impl Default for ReconstructOptions {
    fn default() -> Self {
        ReconstructOptions { substeps: 10, feas_tol: 1e-6, max_backoff: 6 }
    }
}

/// Admissible control, dense trajectory and cost curve recovered from a
/// relaxed solution.
#[derive(Debug, Clone, Serialize)]
pub struct Reconstruction {
    pub mode: DecompositionMode,
    pub decomposition: Decomposition,
    /// The admissible control `α^ε` on `[0, T]`.
    pub control: PiecewiseControl,
    /// Motion-then-freeze relaxed signal, freezing programs only.
    pub beta1: Option<PiecewiseControl>,
    pub dense: Trajectory,
    /// Cost curve of the original problem on the grid nodes.
    pub cost_curve: Vec<f64>,
    pub feasibility: FeasibilityReport,
    pub value: ProblemValue,
    pub tau_star: Option<f64>,
    /// `max_k |x*[k] - x^ε(t_k)|∞`, with `t_k` replaced by `σ(t_k)` for
    /// freezing programs.
    pub tracking_error: f64,
    /// `σ(T)` for freezing programs.
    pub sigma_end: Option<f64>,
    /// Original cost at `σ(T)` for freezing programs.
    pub cost_at_sigma_end: Option<f64>,
    /// Steps whose weights sum to less than one (frozen tails).
    pub frozen_steps: Vec<usize>,
    pub max_identity_residual: f64,
}

/// `∫_0^s L + g(s, x(s))` on a dense trajectory, left-endpoint sum with the
/// last interval cut at `s`.
pub fn cost_at(instance: &ProblemInstance, traj: &Trajectory, control: &PiecewiseControl, s: f64) -> f64 {
    let mut acc = 0.0;
    for i in 0..traj.times.len().saturating_sub(1) {
        let (t0, t1) = (traj.times[i], traj.times[i + 1].min(s));
        if t1 <= t0 {
            break;
        }
        acc += instance.model.stage_cost(t0, &traj.states[i], &control.value_at(t0)) * (t1 - t0);
    }
    acc + instance.model.terminal_cost(s, &traj.state_at(s))
}

/// Decomposes the relaxed solution step by step, builds the admissible
/// schedule, integrates it densely and evaluates the original problem.
pub fn reconstruct(program: &ConvexProgram, solution: &Solution, opts: &ReconstructOptions) -> Result<Reconstruction> {
    if solution.status == SolveStatus::Infeasible || solution.states.len() != program.steps() + 1 {
        return Err(LaxError::Invalid("cannot reconstruct from an infeasible or empty solution".into()));
    }
    let inst = &program.instance;
    let grid = &program.grid;
    let states = &solution.states;
    let mode = if program.zero_hull { DecompositionMode::SubOne } else { DecompositionMode::ExactSumOne };

    let decomposition = if program.kind.is_lax() {
        let decision = if solution.decision.len() == program.steps() {
            solution.decision.clone()
        } else {
            program.decision_from_reported(states, &solution.controls)
        };
        let hstar: Vec<f64> = (0..program.steps())
            .map(|k| program.stage(k, &states[k], &decision[k]).map(|e| e.value))
            .collect::<Result<_>>()?;
        decompose_all(inst, grid, states, &solution.controls, &hstar, mode)?
    } else {
        // Direct programs already carry admissible controls.
        let mut f = vec![0.0; inst.n()];
        let steps = (0..program.steps())
            .map(|k| {
                let a = inst.model.control_set().project(&solution.controls[k]);
                inst.model.dynamics(grid.nodes()[k], &states[k], &a, &mut f);
                DecompositionStep {
                    atoms: vec![Atom { control: a, weight: 1.0 }],
                    betas: vec![f.iter().map(|v| -v).collect()],
                    residual: 0.0,
                }
            })
            .collect();
        Decomposition { mode, steps, filler: inst.model.control_set().first_control() }
    };
    let max_identity_residual = decomposition.steps.iter().map(|s| s.residual).fold(0.0, f64::max);
    let frozen_steps: Vec<usize> = decomposition
        .steps
        .iter()
        .enumerate()
        .filter(|(_, s)| s.weight_sum() < 1.0 - 1e-9)
        .map(|(k, _)| k)
        .collect();

    let (control, beta1) = match mode {
        DecompositionMode::ExactSumOne => (build_alpha_schedule_p1(&decomposition, grid)?, None),
        DecompositionMode::SubOne => {
            let (b1, a) = build_alpha_schedule_p2ti(&decomposition, grid)?;
            (a, Some(b1))
        }
    };
    let dense = integrate_dynamics(inst, &control, &inst.x0, opts.substeps, grid.nodes())?;
    let cost_curve = evaluate_running_objective(inst, &dense, &control, grid)?;
    let feasibility = check_feasibility(inst, &dense, opts.feas_tol, grid);
    let (tau_star, value) = select_terminal_time(&cost_curve, inst.class, feasibility.feasible_upto, grid);

    let (tracking_error, sigma_end, cost_at_sigma_end) = match &beta1 {
        None => {
            let e = grid
                .nodes()
                .iter()
                .zip(states)
                .map(|(t, x)| norm_inf(&diff(x, &dense.state_at(*t))))
                .fold(0.0, f64::max);
            (e, None, None)
        }
        Some(b1) => {
            let e = grid
                .nodes()
                .iter()
                .zip(states)
                .map(|(t, x)| norm_inf(&diff(x, &dense.state_at(pseudo_time(b1, *t)))))
                .fold(0.0, f64::max);
            let se = pseudo_time(b1, grid.horizon());
            (e, Some(se), Some(cost_at(inst, &dense, &control, se)))
        }
    };
    Ok(Reconstruction {
        mode,
        decomposition,
        control,
        beta1,
        dense,
        cost_curve,
        feasibility,
        value,
        tau_star,
        tracking_error,
        sigma_end,
        cost_at_sigma_end,
        frozen_steps,
        max_identity_residual,
    })
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Solution, reconstruction and the constraint tightening that was needed.
#[derive(Debug, Clone, Serialize)]
pub struct PipelineResult {
    pub solution: Solution,
    pub reconstruction: Reconstruction,
    /// Uniform margin added to every state-constraint row after node 0.
    pub margin: f64,
    pub backoff_rounds: usize,
}

/// Solves `program`, reconstructs, and while the dense trajectory violates a
/// constraint, tightens every constraint row past node 0 by twice the
/// observed violation and solves again.
pub fn solve_and_reconstruct(program: &ConvexProgram, solver: &SolverOptions, opts: &ReconstructOptions) -> Result<PipelineResult> {
    let mut p = program.clone();
    let mut margin = 0.0;
    let mut rounds = 0;
    loop {
        let solution = solve(&p, solver)?;
        if solution.status == SolveStatus::Infeasible {
            return Err(LaxError::Invalid(format!(
                "program infeasible{}",
                if margin > 0.0 { format!(" after tightening constraints by {margin:.3e}") } else { String::new() }
            )));
        }
        let reconstruction = reconstruct(&p, &solution, opts)?;
        let upto = match p.kind {
            ProgramKind::Phi2 { k_prime } | ProgramKind::DirectMinMin { k_prime } => k_prime,
            _ if p.instance.class == ProblemClass::MinMin => reconstruction.value.k_star.unwrap_or(0),
            _ => p.steps(),
        };
        let violation = window_violation(&p, &reconstruction, upto);
        if violation <= opts.feas_tol || rounds >= opts.max_backoff {
            return Ok(PipelineResult { solution, reconstruction, margin, backoff_rounds: rounds });
        }
        margin += 2.0 * violation;
        rounds += 1;
        // Node 0 is pinned to x0, tightening it could only make the program infeasible.
        for m in p.margins.iter_mut().skip(1) {
            *m = margin;
        }
    }
}

/// Largest constraint value on the dense samples up to grid node `upto`.
fn window_violation(p: &ConvexProgram, r: &Reconstruction, upto: usize) -> f64 {
    let end = p.grid.nodes()[upto] + 1e-12;
    r.dense
        .times
        .iter()
        .zip(&r.dense.states)
        .take_while(|(t, _)| **t <= end)
        .map(|(t, x)| p.instance.constraint_max(*t, x))
        .fold(f64::NEG_INFINITY, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decomp(weights: &[&[f64]], mode: DecompositionMode) -> Decomposition {
        Decomposition {
            mode,
            steps: weights
                .iter()
                .map(|ws| DecompositionStep {
                    atoms: ws.iter().enumerate().map(|(i, w)| Atom { control: vec![i as f64], weight: *w }).collect(),
                    betas: ws.iter().map(|_| vec![-1.0]).collect(),
                    residual: 0.0,
                })
                .collect(),
            filler: vec![-9.0],
        }
    }

    #[test]
    fn single_atom_schedule_is_stepwise_constant() {
        let grid = TimeGrid::uniform(0.4, 0.2).unwrap();
        let s = build_alpha_schedule_p1(&decomp(&[&[1.0], &[1.0]], DecompositionMode::ExactSumOne), &grid).unwrap();
        assert_eq!(s.values.len(), 2);
        assert_eq!(s.breakpoints, vec![0.0, 0.2, 0.4]);
    }

    #[test]
    fn two_atom_breakpoints() {
        let grid = TimeGrid::with_steps(0.2, 1).unwrap();
        let s = build_alpha_schedule_p1(&decomp(&[&[0.5, 0.5]], DecompositionMode::ExactSumOne), &grid).unwrap();
        assert_eq!(s.breakpoints.len(), 3);
        assert!((s.breakpoints[1] - 0.1).abs() < 1e-15);
        assert_eq!(s.breakpoints[2], 0.2);
    }

    #[test]
    fn weights_must_sum_to_one() {
        let grid = TimeGrid::with_steps(0.2, 1).unwrap();
        assert!(build_alpha_schedule_p1(&decomp(&[&[0.5]], DecompositionMode::ExactSumOne), &grid).is_err());
    }

    #[test]
    fn no_freezing_keeps_time() {
        let grid = TimeGrid::uniform(1.0, 0.5).unwrap();
        let (b1, a) = build_alpha_schedule_p2ti(&decomp(&[&[1.0], &[1.0]], DecompositionMode::SubOne), &grid).unwrap();
        for s in [0.0, 0.3, 0.5, 1.0] {
            assert!((pseudo_time(&b1, s) - s).abs() < 1e-15);
        }
        assert_eq!(a.end(), 1.0);
        assert!(a.values.iter().all(|v| v[0] != -9.0));
    }

    #[test]
    fn full_freezing_is_pure_filler() {
        let grid = TimeGrid::uniform(1.0, 0.5).unwrap();
        let (b1, a) = build_alpha_schedule_p2ti(&decomp(&[&[], &[]], DecompositionMode::SubOne), &grid).unwrap();
        assert_eq!(pseudo_time(&b1, 1.0), 0.0);
        assert_eq!(a.values, vec![vec![-9.0]]);
    }

    #[test]
    fn partial_freezing_compresses_time() {
        let grid = TimeGrid::uniform(1.0, 0.5).unwrap();
        let (b1, a) = build_alpha_schedule_p2ti(&decomp(&[&[0.4], &[1.0]], DecompositionMode::SubOne), &grid).unwrap();
        assert!((pseudo_time(&b1, 1.0) - 0.7).abs() < 1e-15);
        assert!((a.breakpoints[1] - 0.2).abs() < 1e-15);
        assert!((a.breakpoints[2] - 0.7).abs() < 1e-15);
        assert_eq!(a.values.last().unwrap(), &vec![-9.0]);
        assert!((pseudo_time_inverse(&b1, 0.2).unwrap() - 0.2).abs() < 1e-15);
        assert!((pseudo_time_inverse(&b1, 0.3).unwrap() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn pseudo_time_examples() {
        let b = PiecewiseControl::new(vec![0.0, 1.0, 2.0], vec![vec![1.0], vec![0.0]]).unwrap();
        assert_eq!(pseudo_time(&b, 2.0), 1.0);
        assert_eq!(pseudo_time(&b, 0.0), 0.0);
        let b = PiecewiseControl::new(vec![0.0, 0.5, 2.0], vec![vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(pseudo_time_inverse(&b, 0.0).unwrap(), 0.0);
        assert!(matches!(pseudo_time_inverse(&b, 5.0), Err(LaxError::Range { .. })));
    }

    #[test]
    fn terminal_time_examples() {
        let grid = TimeGrid::uniform(1.0, 0.25).unwrap();
        let (t, v) = select_terminal_time(&[4.0, 3.0, 2.0, 1.0, 0.0], ProblemClass::MinMin, Some(4), &grid);
        assert_eq!((t, v.k_star), (Some(1.0), Some(4)));
    }

    #[test]
    fn piecewise_lookup() {
        let p = PiecewiseControl::new(vec![0.0, 0.5, 1.0], vec![vec![1.0], vec![2.0]]).unwrap();
        assert_eq!(p.value_at(0.5), vec![2.0]);
        assert_eq!(p.value_at(0.49), vec![1.0]);
        assert_eq!(p.value_at(1.0), vec![2.0]);
        assert!(PiecewiseControl::new(vec![0.0, 0.0], vec![vec![1.0]]).is_err());
    }
}
