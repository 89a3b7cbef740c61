//! Augmented-Lagrangian solver for transcribed programs.
//!
//! States are eliminated by forward propagation, so the only explicit
//! constraints are per-step set memberships, the state constraints and, for
//! MinMax programs, the epigraph rows. The epigraph variable is minimised
//! out in closed form. Memberships normally enter the augmented Lagrangian
//! through the squared distance to each set, which leaves a smooth
//! unconstrained inner problem for L-BFGS; propagation through the dynamics
//! makes these problems too ill-conditioned for plain gradient steps. When
//! the stage cost is undefined off the sets, memberships are kept by
//! projection and a spectral projected gradient method is used instead.
//!
//! Terminal costs that declare a norm split get one epigraph scalar per
//! norm and a second-order cone row, so nothing is smoothed. Otherwise
//! nonsmooth terminal costs are pseudo-Huber smoothed with a continuation
//! down to `SolverOptions::smoothing_floor`. The reported value is always
//! the exact, unsmoothed objective.

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;
use crate::lax_transcription::{
    build_direct_subprogram, build_phi2_subprogram, ConvexProgram, Objective, ProgramKind,
};
use crate::numerics::{dot, norm2, norm_inf};
use crate::problem_model::{NormTerm, ProblemInstance, TimeGrid};

const RHO_INIT: f64 = 10.0;
const RHO_MAX: f64 = 1e12;
const MU_INIT: f64 = 1e-2;
const ARMIJO: f64 = 1e-4;
const STEP_MIN: f64 = 1e-12;
const STEP_MAX: f64 = 1e8;
const MAX_OUTER: usize = 80;

#[derive(Debug, Clone, Serialize)]
pub struct SolverOptions {
    /// Budget of inner iterations summed over all outer rounds.
    pub max_iter: usize,
    pub feas_tol: f64,
    pub stat_tol: f64,
    /// Only used to perturb the start when `random_start` is set.
    pub seed: u64,
    pub random_start: bool,
    pub smoothing_floor: f64,
    pub verbose: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iter: 20000,
            feas_tol: 1e-8,
            stat_tol: 1e-6,
            seed: 0,
            random_start: false,
            smoothing_floor: 1e-6,
            verbose: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    /// Iteration budget exhausted; the best point found is returned.
    NotConverged,
    Infeasible,
}

/// One line of the iteration log.
#[derive(Debug, Clone, Serialize)]
pub struct IterRecord {
    pub outer: usize,
    pub iter: usize,
    pub merit: f64,
    pub objective: f64,
    pub feasibility: f64,
    pub stationarity: f64,
}

/// Residuals per family, with the location of the worst offender.
#[derive(Debug, Clone, Default, Serialize)]
pub struct ResidualReport {
    pub dynamics: f64,
    pub dynamics_step: Option<usize>,
    pub membership: f64,
    pub membership_step: Option<usize>,
    pub constraint: f64,
    pub constraint_node: Option<usize>,
    pub constraint_index: Option<usize>,
    /// `|reported value - re-evaluated objective|`.
    pub objective_gap: f64,
    pub stationarity: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Solution {
    pub kind: ProgramKind,
    pub status: SolveStatus,
    pub converged: bool,
    /// "global" when the audit certifies the program convex, otherwise
    /// "local/stationary".
    pub label: String,
    /// Exact objective; `+∞` (JSON `null`) when infeasible.
    pub value: f64,
    pub eta: Option<f64>,
    /// Arg max of the cost curve (MinMax) or the fixed terminal index.
    pub k_star: Option<usize>,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// `β[k]` for Lax programs, `α[k]` for direct ones.
    pub controls: Vec<Vec<f64>>,
    pub cost_curve: Vec<f64>,
    pub residuals: ResidualReport,
    pub iterations: usize,
    pub outer_iterations: usize,
    pub penalty: f64,
    pub message: Option<String>,
    #[serde(skip)]
    pub wall_time: f64,
    #[serde(skip)]
    pub log: Vec<IterRecord>,
    #[serde(skip)]
    pub decision: Vec<Vec<f64>>,
}

struct Multipliers {
    lam: Vec<f64>,
    nu: Vec<Vec<f64>>,
    /// Set-membership multipliers; empty when membership is kept by projection.
    mem: Vec<Vec<f64>>,
    /// Multipliers of the cone rows, `(t, v)` layout.
    cone: Vec<Vec<f64>>,
    rho: f64,
}

struct Eval {
    merit: f64,
    grad: Vec<Vec<f64>>,
    curve: Vec<f64>,
    eta: f64,
    /// Updated objective multipliers (sum to one for the epigraph).
    theta: Vec<f64>,
    /// Updated constraint multipliers.
    sigma: Vec<Vec<f64>>,
    /// Raw constraint values plus margins.
    cons: Vec<Vec<f64>>,
    /// Updated membership multipliers (penalty mode only).
    mem: Vec<Vec<f64>>,
    /// Updated cone multipliers.
    cone: Vec<Vec<f64>>,
    /// Largest distance of a control to its admissible set.
    dist: f64,
}

/// Root of `Σ max(0, a_i - η) = 1/ρ`.
fn epigraph_eta(a: &[f64], rho: f64) -> f64 {
    let mut s: Vec<f64> = a.to_vec();
    s.sort_by(|x, y| y.total_cmp(x));
    let mut cum = 0.0;
    for m in 1..=s.len() {
        cum += s[m - 1];
        let eta = (cum - 1.0 / rho) / m as f64;
        if m == s.len() || s[m] <= eta {
            return eta;
        }
    }
    unreachable!("empty epigraph")
}

/// Norm terms of the terminal cost lifted into cone rows `|A x_k - b| <= t`.
struct Cones {
    /// `(node, term)` per epigraph scalar `t`.
    terms: Vec<(usize, NormTerm)>,
    /// Range of `terms` per node.
    ranges: Vec<std::ops::Range<usize>>,
}

impl Cones {
    /// `None` unless every terminal index declares its norm split.
    fn of(p: &ConvexProgram) -> Option<Cones> {
        let nodes = p.grid.nodes();
        let mut terms = Vec::new();
        let mut ranges = vec![0..0; p.steps() + 1];
        for k in p.terminal_indices() {
            let start = terms.len();
            for t in p.instance.model.terminal_norms(nodes[k])? {
                terms.push((k, t));
            }
            ranges[k] = start..terms.len();
        }
        Some(Cones { terms, ranges })
    }

    /// Tight epigraph scalars for the given states.
    fn tight(&self, states: &[Vec<f64>]) -> Vec<f64> {
        self.terms.iter().map(|(k, t)| norm2(&t.residual(&states[*k]))).collect()
    }
}

/// Projection onto `{(t, v) : |v| <= t}`.
fn project_soc(t: f64, v: &[f64]) -> (f64, Vec<f64>) {
    let nv = norm2(v);
    if nv <= t {
        (t, v.to_vec())
    } else if nv <= -t {
        (0.0, vec![0.0; v.len()])
    } else {
        let a = 0.5 * (t + nv);
        (a, v.iter().map(|x| a * x / nv).collect())
    }
}

/// Projection of block `k`: the admissible set for controls, identity for
/// the block of cone scalars.
fn project_block(p: &ConvexProgram, k: usize, v: &[f64]) -> Vec<f64> {
    if k < p.steps() {
        p.project(k, v)
    } else {
        v.to_vec()
    }
}

fn evaluate(p: &ConvexProgram, cones: Option<&Cones>, w: &[Vec<f64>], mult: &Multipliers, mu: f64) -> Result<Eval> {
    let n = p.instance.n();
    let kk = p.steps();
    let nodes = p.grid.nodes();
    let model = &p.instance.model;
    let controls = &w[..kk];
    let states = p.propagate(controls);
    let mut stages = Vec::with_capacity(kk);
    for k in 0..kk {
        stages.push(p.stage(k, &states[k], &controls[k])?);
    }
    let terms = p.terminal_indices();
    let mut gvals = vec![0.0; kk + 1];
    let mut ggrads = vec![Vec::new(); kk + 1];
    for &k in &terms {
        let mut g = vec![0.0; n];
        gvals[k] = match cones {
            Some(c) => {
                let tv = &w[kk];
                model.terminal_smooth(nodes[k], &states[k], &mut g)
                    + c.ranges[k].clone().map(|i| c.terms[i].1.weight * tv[i]).sum::<f64>()
            }
            None => model.terminal_cost_grad(nodes[k], &states[k], mu, &mut g),
        };
        ggrads[k] = g;
    }
    let mut curve = vec![0.0; kk + 1];
    let mut acc = 0.0;
    for k in 0..=kk {
        if k > 0 {
            acc += p.grid.dt(k - 1) * stages[k - 1].value;
        }
        curve[k] = acc + gvals[k];
    }

    let rho = mult.rho;
    let mut theta = vec![0.0; kk + 1];
    let (mut merit, eta) = match p.objective {
        Objective::Epigraph => {
            let a: Vec<f64> = (0..=kk).map(|k| curve[k] + mult.lam[k] / rho).collect();
            let eta = epigraph_eta(&a, rho);
            let mut m = eta;
            for k in 0..=kk {
                let h = (a[k] - eta).max(0.0);
                theta[k] = rho * h;
                m += 0.5 * rho * (h * h - (mult.lam[k] / rho).powi(2));
            }
            (m, eta)
        }
        Objective::Fixed(k) => {
            theta[k] = 1.0;
            (curve[k], curve[k])
        }
    };

    let nc = model.constraint_count();
    let mut cons = Vec::with_capacity(p.constraint_upto + 1);
    let mut sigma = Vec::with_capacity(p.constraint_upto + 1);
    for k in 0..=p.constraint_upto {
        let mut c = vec![0.0; nc];
        model.constraints(nodes[k], &states[k], &mut c);
        let mut sg = vec![0.0; nc];
        for j in 0..nc {
            c[j] += p.margins[k];
            let b = c[j] + mult.nu[k][j] / rho;
            let h = b.max(0.0);
            sg[j] = rho * h;
            merit += 0.5 * rho * (h * h - (mult.nu[k][j] / rho).powi(2));
        }
        cons.push(c);
        sigma.push(sg);
    }

    let mut dist = 0.0_f64;
    let mut mem = Vec::new();
    if !mult.mem.is_empty() {
        for k in 0..kk {
            let v: Vec<f64> = w[k].iter().zip(&mult.mem[k]).map(|(a, m)| a + m / rho).collect();
            let pr = p.project(k, &v);
            let d: Vec<f64> = v.iter().zip(&pr).map(|(a, b)| a - b).collect();
            let shift: f64 = mult.mem[k].iter().map(|m| (m / rho).powi(2)).sum();
            merit += 0.5 * rho * (dot(&d, &d) - shift);
            let wp = p.project(k, &w[k]);
            dist = dist.max(w[k].iter().zip(&wp).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
            mem.push(d.iter().map(|x| rho * x).collect::<Vec<f64>>());
        }
    }

    // Cone rows: penalty on the distance to the second-order cone.
    let mut xextra = vec![vec![0.0; n]; kk + 1];
    let mut cone = Vec::new();
    let mut grad_t = Vec::new();
    if let Some(c) = cones {
        let tv = &w[kk];
        for (i, (k, term)) in c.terms.iter().enumerate() {
            let v = term.residual(&states[*k]);
            let (pt, pv) = project_soc(tv[i], &v);
            dist = dist.max((tv[i] - pt).abs()).max(v.iter().zip(&pv).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
            let nu = &mult.cone[i];
            let zt = tv[i] + nu[0] / rho;
            let zv: Vec<f64> = v.iter().zip(&nu[1..]).map(|(a, m)| a + m / rho).collect();
            let (qt, qv) = project_soc(zt, &zv);
            let dt = zt - qt;
            let dv: Vec<f64> = zv.iter().zip(&qv).map(|(a, b)| a - b).collect();
            let shift: f64 = nu.iter().map(|m| (m / rho).powi(2)).sum();
            merit += 0.5 * rho * (dt * dt + dot(&dv, &dv) - shift);
            let yv: Vec<f64> = dv.iter().map(|d| rho * d).collect();
            term.add_transpose(&yv, &mut xextra[*k]);
            grad_t.push(theta[*k] * term.weight + rho * dt);
            let mut m = Vec::with_capacity(1 + yv.len());
            m.push(rho * dt);
            m.extend(yv);
            cone.push(m);
        }
    }

    // Adjoint sweep.
    let mut tail = vec![0.0; kk + 2];
    for k in (0..=kk).rev() {
        tail[k] = tail[k + 1] + theta[k];
    }
    let mut grad = vec![Vec::new(); kk];
    let mut lam = direct_x(p, kk, &states[kk], &theta, &ggrads, &sigma);
    for (l, e) in lam.iter_mut().zip(&xextra[kk]) {
        *l += e;
    }
    for k in (0..kk).rev() {
        let weight = tail[k + 1] * p.grid.dt(k);
        let (mut gx, mut gw) = p.step_adjoint(k, &states[k], &w[k], &lam);
        for i in 0..gw.len() {
            gw[i] += weight * stages[k].grad_w[i];
        }
        let dx = direct_x(p, k, &states[k], &theta, &ggrads, &sigma);
        for i in 0..n {
            gx[i] += dx[i] + xextra[k][i] + weight * stages[k].grad_x[i];
        }
        if !mem.is_empty() {
            for (g, m) in gw.iter_mut().zip(&mem[k]) {
                *g += m;
            }
        }
        grad[k] = gw;
        lam = gx;
    }
    if cones.is_some() {
        grad.push(grad_t);
    }
    Ok(Eval { merit, grad, curve, eta, theta, sigma, cons, mem, cone, dist })
}

/// Direct state gradient at node `k` from the terminal and constraint terms.
fn direct_x(p: &ConvexProgram, k: usize, x: &[f64], theta: &[f64], ggrads: &[Vec<f64>], sigma: &[Vec<f64>]) -> Vec<f64> {
    let n = x.len();
    let mut out = vec![0.0; n];
    if theta[k] != 0.0 {
        for i in 0..n {
            out[i] += theta[k] * ggrads[k][i];
        }
    }
    if k <= p.constraint_upto {
        let mut g = vec![0.0; n];
        for (j, s) in sigma[k].iter().enumerate() {
            if *s > 0.0 {
                p.instance.model.constraint_grad(p.grid.nodes()[k], x, j, &mut g);
                for i in 0..n {
                    out[i] += s * g[i];
                }
            }
        }
    }
    out
}

fn projected_gradient_norm(p: &ConvexProgram, w: &[Vec<f64>], g: &[Vec<f64>]) -> f64 {
    let mut m = 0.0_f64;
    for k in 0..w.len() {
        let trial: Vec<f64> = w[k].iter().zip(&g[k]).map(|(a, b)| a - b).collect();
        let pr = project_block(p, k, &trial);
        for (a, b) in w[k].iter().zip(&pr) {
            m = m.max((a - b).abs());
        }
    }
    m
}

fn violation(p: &ConvexProgram, e: &Eval) -> f64 {
    let mut v = e.dist;
    for c in &e.cons {
        for cj in c {
            v = v.max(*cj);
        }
    }
    if p.objective == Objective::Epigraph {
        for c in &e.curve {
            v = v.max(c - e.eta);
        }
    }
    v
}

fn complementarity(p: &ConvexProgram, e: &Eval) -> f64 {
    let mut m = 0.0_f64;
    for (c, s) in e.cons.iter().zip(&e.sigma) {
        for (cj, sj) in c.iter().zip(s) {
            m = m.max(sj.min(-cj).abs());
        }
    }
    if p.objective == Objective::Epigraph {
        let top = e.curve.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (c, t) in e.curve.iter().zip(&e.theta) {
            m = m.max(t.min(top - c).abs());
        }
    }
    m
}

struct InnerOutcome {
    w: Vec<Vec<f64>>,
    eval: Eval,
    iters: usize,
    stalled: bool,
}

#[allow(clippy::too_many_arguments)]
fn inner_solve(
    p: &ConvexProgram,
    cones: Option<&Cones>,
    mut w: Vec<Vec<f64>>,
    mult: &Multipliers,
    mu: f64,
    tol: f64,
    budget: usize,
    outer: usize,
    log: &mut Vec<IterRecord>,
    verbose: bool,
) -> Result<InnerOutcome> {
    let mut e = evaluate(p, cones, &w, mult, mu)?;
    let g0 = e.grad.iter().map(|g| norm_inf(g)).fold(0.0, f64::max);
    let mut step = if g0 > 0.0 { (1.0 / g0).clamp(STEP_MIN, STEP_MAX) } else { 1.0 };
    let mut iters = 0;
    let mut stalled = false;
    loop {
        let pg = projected_gradient_norm(p, &w, &e.grad);
        if pg <= tol || iters >= budget {
            break;
        }
        let dir: Vec<Vec<f64>> = (0..w.len())
            .map(|k| {
                let trial: Vec<f64> = w[k].iter().zip(&e.grad[k]).map(|(a, b)| a - step * b).collect();
                project_block(p, k, &trial).iter().zip(&w[k]).map(|(a, b)| a - b).collect()
            })
            .collect();
        let slope: f64 = flat_dot(&dir, &e.grad);
        if slope >= 0.0 {
            stalled = true;
            break;
        }
        let mut t = 1.0;
        let accepted = loop {
            let cand: Vec<Vec<f64>> =
                w.iter().zip(&dir).map(|(a, d)| a.iter().zip(d).map(|(x, y)| x + t * y).collect()).collect();
            let ec = evaluate(p, cones, &cand, mult, mu)?;
            if ec.merit <= e.merit + ARMIJO * t * slope {
                break Some((cand, ec));
            }
            t *= 0.5;
            if t < 1e-16 {
                break None;
            }
        };
        iters += 1;
        let Some((wn, en)) = accepted else {
            stalled = true;
            break;
        };
        let mut ss = 0.0;
        let mut sy = 0.0;
        for k in 0..w.len() {
            for i in 0..w[k].len() {
                let s = wn[k][i] - w[k][i];
                let y = en.grad[k][i] - e.grad[k][i];
                ss += s * s;
                sy += s * y;
            }
        }
        step = if sy > 0.0 { (ss / sy).clamp(STEP_MIN, STEP_MAX) } else { STEP_MAX };
        w = wn;
        e = en;
        let rec = IterRecord {
            outer,
            iter: log.len(),
            merit: e.merit,
            objective: exact_objective_hint(p, &e),
            feasibility: violation(p, &e),
            stationarity: pg,
        };
        if verbose {
            eprintln!(
                "iter={} outer={} merit={:.12e} objective={:.12e} feasibility={:.3e} stationarity={:.3e}",
                rec.iter, rec.outer, rec.merit, rec.objective, rec.feasibility, rec.stationarity
            );
        }
        log.push(rec);
        if ss.sqrt() <= 1e-15 * (1.0 + w.iter().map(|v| norm_inf(v)).fold(0.0, f64::max)) {
            stalled = true;
            break;
        }
    }
    Ok(InnerOutcome { w, eval: e, iters, stalled })
}

const LBFGS_MEMORY: usize = 12;

fn flat_dot(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| dot(x, y)).sum()
}

fn flat_norm_inf(a: &[Vec<f64>]) -> f64 {
    a.iter().map(|v| norm_inf(v)).fold(0.0, f64::max)
}

/// L-BFGS on the unconstrained merit of penalty mode, where set membership
/// lives in the augmented Lagrangian instead of a projection.
#[allow(clippy::too_many_arguments)]
fn inner_lbfgs(
    p: &ConvexProgram,
    cones: Option<&Cones>,
    mut w: Vec<Vec<f64>>,
    mult: &Multipliers,
    mu: f64,
    tol: f64,
    budget: usize,
    outer: usize,
    log: &mut Vec<IterRecord>,
    verbose: bool,
) -> Result<InnerOutcome> {
    let mut e = evaluate(p, cones, &w, mult, mu)?;
    let mut hist: std::collections::VecDeque<(Vec<Vec<f64>>, Vec<Vec<f64>>, f64)> = std::collections::VecDeque::new();
    let mut iters = 0;
    let mut stalled = false;
    loop {
        let gnorm = flat_norm_inf(&e.grad);
        if gnorm <= tol || iters >= budget {
            break;
        }
        // Two-loop recursion.
        let mut q = e.grad.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (sv, yv, rho_i) in hist.iter().rev() {
            let a = rho_i * flat_dot(sv, &q);
            for (qk, yk) in q.iter_mut().zip(yv) {
                for (qi, yi) in qk.iter_mut().zip(yk) {
                    *qi -= a * yi;
                }
            }
            alphas.push(a);
        }
        let gamma = match hist.back() {
            Some((sv, yv, _)) => flat_dot(sv, yv) / flat_dot(yv, yv),
            None => 1.0 / gnorm.max(1e-300),
        };
        for qk in q.iter_mut() {
            for qi in qk.iter_mut() {
                *qi *= gamma;
            }
        }
        for ((sv, yv, rho_i), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho_i * flat_dot(yv, &q);
            for (qk, sk) in q.iter_mut().zip(sv) {
                for (qi, si) in qk.iter_mut().zip(sk) {
                    *qi += (a - b) * si;
                }
            }
        }
        let mut dir: Vec<Vec<f64>> = q.iter().map(|v| v.iter().map(|x| -x).collect()).collect();
        let mut slope = flat_dot(&dir, &e.grad);
        if !(slope < 0.0) {
            hist.clear();
            let scale = 1.0 / gnorm;
            dir = e.grad.iter().map(|v| v.iter().map(|x| -scale * x).collect()).collect();
            slope = flat_dot(&dir, &e.grad);
        }
        let mut t = 1.0;
        let accepted = loop {
            let cand: Vec<Vec<f64>> =
                w.iter().zip(&dir).map(|(a, d)| a.iter().zip(d).map(|(x, y)| x + t * y).collect()).collect();
            let ec = evaluate(p, cones, &cand, mult, mu)?;
            if ec.merit <= e.merit + ARMIJO * t * slope {
                break Some((cand, ec));
            }
            t *= 0.5;
            if t < 1e-16 {
                break None;
            }
        };
        iters += 1;
        let Some((wn, en)) = accepted else {
            if hist.is_empty() {
                stalled = true;
                break;
            }
            hist.clear();
            continue;
        };
        let sv: Vec<Vec<f64>> = wn.iter().zip(&w).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect()).collect();
        let yv: Vec<Vec<f64>> =
            en.grad.iter().zip(&e.grad).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect()).collect();
        let sy = flat_dot(&sv, &yv);
        let step_size = flat_norm_inf(&sv);
        if sy > 1e-12 * flat_dot(&sv, &sv).sqrt() * flat_dot(&yv, &yv).sqrt() && sy > 0.0 {
            if hist.len() == LBFGS_MEMORY {
                hist.pop_front();
            }
            hist.push_back((sv, yv, 1.0 / sy));
        }
        w = wn;
        e = en;
        let rec = IterRecord {
            outer,
            iter: log.len(),
            merit: e.merit,
            objective: exact_objective_hint(p, &e),
            feasibility: violation(p, &e),
            stationarity: gnorm,
        };
        if verbose {
            eprintln!(
                "iter={} outer={} merit={:.12e} objective={:.12e} feasibility={:.3e} stationarity={:.3e}",
                rec.iter, rec.outer, rec.merit, rec.objective, rec.feasibility, rec.stationarity
            );
        }
        log.push(rec);
        if step_size <= 1e-15 * (1.0 + flat_norm_inf(&w)) {
            stalled = true;
            break;
        }
    }
    Ok(InnerOutcome { w, eval: e, iters, stalled })
}

fn exact_objective_hint(p: &ConvexProgram, e: &Eval) -> f64 {
    p.objective_value(&e.curve)
}

fn label_for(p: &ConvexProgram) -> String {
    if p.certificate.convex { "global" } else { "local/stationary" }.to_string()
}

fn infeasible_solution(p: &ConvexProgram, w: Vec<Vec<f64>>, message: String, started: Instant) -> Result<Solution> {
    let states = p.propagate(&w);
    let controls = p.reported_controls(&states, &w);
    let curve = p.cost_curve(&states, &w, 0.0)?;
    let mut sol = Solution {
        kind: p.kind,
        status: SolveStatus::Infeasible,
        converged: false,
        label: label_for(p),
        value: f64::INFINITY,
        eta: None,
        k_star: None,
        times: p.grid.nodes().to_vec(),
        states,
        controls,
        cost_curve: curve,
        residuals: ResidualReport::default(),
        iterations: 0,
        outer_iterations: 0,
        penalty: 0.0,
        message: Some(message),
        wall_time: 0.0,
        log: Vec::new(),
        decision: w,
    };
    sol.residuals = certify(p, &sol);
    sol.residuals.objective_gap = 0.0;
    sol.wall_time = started.elapsed().as_secs_f64();
    Ok(sol)
}

/// Constraint rows that no control can fix: violated at the initial state,
/// or state-independent and violated at some constrained node.
fn structural_infeasibility(p: &ConvexProgram, tol: f64) -> Option<String> {
    let model = &p.instance.model;
    let nc = model.constraint_count();
    if nc == 0 {
        return None;
    }
    let mut c = vec![0.0; nc];
    let nodes = p.grid.nodes();
    model.constraints(nodes[0], p.x0(), &mut c);
    if let Some(j) = (0..nc).find(|&j| c[j] > tol) {
        return Some(format!("constraint {j} is violated at the initial state (c = {:.6e})", c[j]));
    }
    if model.structure().constraint.state_independent {
        for k in 1..=p.constraint_upto {
            model.constraints(nodes[k], p.x0(), &mut c);
            if let Some(j) = (0..nc).find(|&j| c[j] > tol) {
                return Some(format!("state-independent constraint {j} is violated at t = {}", nodes[k]));
            }
        }
    }
    None
}

/// Membership moves into the augmented Lagrangian unless the stage cost is
/// only defined on the admissible set, which is the case for the perspective
/// stage of freezing programs with nonzero running cost.
fn uses_membership_penalty(p: &ConvexProgram) -> bool {
    !p.zero_hull || p.instance.model.structure().stage.zero
}

/// Solve from the neutral start (or a seeded random admissible start when
/// `options.random_start` is set).
pub fn solve(program: &ConvexProgram, options: &SolverOptions) -> Result<Solution> {
    let start = if options.random_start { random_start(program, options.seed) } else { program.initial_controls() };
    solve_from(program, options, start)
}

/// Seeded admissible start: uniform noise projected step by step.
pub fn random_start(program: &ConvexProgram, seed: u64) -> Vec<Vec<f64>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let base = program.initial_controls();
    base.iter()
        .enumerate()
        .map(|(k, w)| {
            let trial: Vec<f64> = w.iter().map(|v| v + rng.gen_range(-2.0..2.0)).collect();
            program.project(k, &trial)
        })
        .collect()
}

/// Solve from a given start; each control is projected first.
pub fn solve_from(program: &ConvexProgram, options: &SolverOptions, start: Vec<Vec<f64>>) -> Result<Solution> {
    let started = Instant::now();
    let p = program;
    let kk = p.steps();
    let mut w: Vec<Vec<f64>> = start.iter().enumerate().map(|(k, v)| p.project(k, v)).collect();
    if let Some(msg) = structural_infeasibility(p, options.feas_tol) {
        return infeasible_solution(p, w, msg, started);
    }
    let nc = p.instance.model.constraint_count();
    let penalty_mode = uses_membership_penalty(p);
    let cones = Cones::of(p);
    let cones = cones.as_ref();
    if let Some(c) = cones {
        w.push(c.tight(&p.propagate(&w)));
    }
    let mut mult = Multipliers {
        lam: vec![0.0; kk + 1],
        nu: vec![vec![0.0; nc]; p.constraint_upto + 1],
        mem: if penalty_mode { vec![vec![0.0; p.control_dim()]; kk] } else { Vec::new() },
        cone: cones.map_or(Vec::new(), |c| c.terms.iter().map(|(_, t)| vec![0.0; 1 + t.rows.len()]).collect()),
        rho: RHO_INIT,
    };
    let floor = options.smoothing_floor.max(0.0);
    // Declared norm terms are handled exactly by the cone rows.
    let mut mu = if cones.is_some() { 0.0 } else { MU_INIT.max(floor) };
    let mut log = Vec::new();
    let mut total = 0;
    let mut prev_viol = f64::INFINITY;
    let mut status = SolveStatus::NotConverged;
    let mut message = None;
    let mut outer = 0;
    let mut last_stat = f64::INFINITY;
    let mut stall_rounds = 0;
    while outer < MAX_OUTER {
        let tol_in = (1e-2 * 0.1f64.powi(outer as i32)).max(0.5 * options.stat_tol);
        let budget = options.max_iter.saturating_sub(total);
        let res = if penalty_mode {
            inner_lbfgs(p, cones, w, &mult, mu, tol_in, budget, outer, &mut log, options.verbose)?
        } else {
            inner_solve(p, cones, w, &mult, mu, tol_in, budget, outer, &mut log, options.verbose)?
        };
        total += res.iters;
        w = res.w;
        let e = res.eval;
        let viol = violation(p, &e);
        // The merit gradient is the Lagrangian gradient at the updated
        // multipliers.
        let pg = if penalty_mode { flat_norm_inf(&e.grad) } else { projected_gradient_norm(p, &w, &e.grad) };
        let stat = pg.max(complementarity(p, &e));
        last_stat = stat;
        mult.lam = e.theta.clone();
        mult.nu = e.sigma.clone();
        if penalty_mode {
            mult.mem = e.mem.clone();
        }
        if cones.is_some() {
            mult.cone = e.cone.clone();
        }
        outer += 1;
        let smooth_done = mu <= floor;
        if viol <= options.feas_tol && stat <= options.stat_tol && smooth_done {
            status = SolveStatus::Converged;
            break;
        }
        if res.stalled && res.iters == 0 {
            stall_rounds += 1;
        } else {
            stall_rounds = 0;
        }
        if viol > options.feas_tol && viol > 0.25 * prev_viol {
            mult.rho *= 10.0;
        }
        prev_viol = viol;
        mu = (mu * 0.1).max(floor);
        if mult.rho > RHO_MAX && viol > options.feas_tol {
            status = SolveStatus::Infeasible;
            message = Some(format!("penalty exceeded {RHO_MAX:e} with violation {viol:.3e}"));
            break;
        }
        if total >= options.max_iter {
            message = Some(format!("iteration budget of {} exhausted", options.max_iter));
            break;
        }
        if stall_rounds >= 3 && smooth_done {
            message = Some("line search stalled at machine precision".into());
            break;
        }
    }
    if status == SolveStatus::NotConverged && message.is_none() {
        message = Some(format!("outer round limit {MAX_OUTER} reached"));
    }
    w.truncate(kk);
    if penalty_mode {
        // Within feas_tol of the sets when converged; land on them exactly.
        w = w.iter().enumerate().map(|(k, v)| p.project(k, v)).collect();
    }
    if status == SolveStatus::Infeasible {
        let mut sol = infeasible_solution(p, w, message.unwrap_or_default(), started)?;
        sol.iterations = total;
        sol.outer_iterations = outer;
        sol.penalty = mult.rho;
        sol.log = log;
        return Ok(sol);
    }
    let states = p.propagate(&w);
    let controls = p.reported_controls(&states, &w);
    let curve = p.cost_curve(&states, &w, 0.0)?;
    let value = p.objective_value(&curve);
    let k_star = match p.objective {
        Objective::Epigraph => {
            let mut best = 0;
            for (k, c) in curve.iter().enumerate() {
                if *c > curve[best] {
                    best = k;
                }
            }
            Some(best)
        }
        Objective::Fixed(k) => Some(k),
    };
    let mut sol = Solution {
        kind: p.kind,
        status,
        converged: status == SolveStatus::Converged,
        label: label_for(p),
        value,
        eta: (p.objective == Objective::Epigraph).then_some(value),
        k_star,
        times: p.grid.nodes().to_vec(),
        states,
        controls,
        cost_curve: curve,
        residuals: ResidualReport::default(),
        iterations: total,
        outer_iterations: outer,
        penalty: mult.rho,
        message,
        wall_time: 0.0,
        log,
        decision: w,
    };
    sol.residuals = certify(p, &sol);
    sol.residuals.stationarity = last_stat;
    sol.wall_time = started.elapsed().as_secs_f64();
    Ok(sol)
}

/// Recompute every residual family from the stored assignment alone.
pub fn certify(program: &ConvexProgram, solution: &Solution) -> ResidualReport {
    let p = program;
    let mut r = ResidualReport { stationarity: solution.residuals.stationarity, ..Default::default() };
    let xs = &solution.states;
    let decision = p.decision_from_reported(xs, &solution.controls);
    for k in 0..p.steps() {
        let v = p.velocity(k, &xs[k], &decision[k]);
        let dt = p.grid.dt(k);
        let row = (0..xs[k].len()).map(|i| (xs[k + 1][i] - xs[k][i] - dt * v[i]).abs()).fold(0.0, f64::max);
        if row > r.dynamics || r.dynamics_step.is_none() && row > 0.0 {
            r.dynamics = row;
            r.dynamics_step = Some(k);
        }
        let m = p.membership_margin(k, &decision[k]).max(0.0);
        if m > r.membership {
            r.membership = m;
            r.membership_step = Some(k);
        }
    }
    let nc = p.instance.model.constraint_count();
    let mut c = vec![0.0; nc];
    for k in 0..=p.constraint_upto {
        p.instance.model.constraints(p.grid.nodes()[k], &xs[k], &mut c);
        for (j, cj) in c.iter().enumerate() {
            if *cj > r.constraint {
                r.constraint = *cj;
                r.constraint_node = Some(k);
                r.constraint_index = Some(j);
            }
        }
    }
    r.objective_gap = match p.cost_curve(xs, &decision, 0.0) {
        Ok(curve) if solution.value.is_finite() => (p.objective_value(&curve) - solution.value).abs(),
        Ok(_) => 0.0,
        Err(_) => f64::INFINITY,
    };
    r
}

/// Result of a sweep over terminal indices.
#[derive(Debug, Clone, Serialize)]
pub struct SweepResult {
    pub k_star: Option<usize>,
    pub solution: Solution,
    /// Value per terminal index, `null` where infeasible.
    pub values: Vec<f64>,
}

fn sweep<F>(grid: &TimeGrid, options: &SolverOptions, build: F) -> Result<SweepResult>
where
    F: Fn(usize) -> Result<ConvexProgram> + Sync,
{
    let sols: Vec<Result<Solution>> = (0..=grid.steps())
        .into_par_iter()
        .map(|k| build(k).and_then(|p| solve(&p, options)))
        .collect();
    let sols: Vec<Solution> = sols.into_iter().collect::<Result<_>>()?;
    let values: Vec<f64> = sols.iter().map(|s| s.value).collect();
    let mut best: Option<usize> = None;
    for (k, s) in sols.iter().enumerate() {
        if s.status == SolveStatus::Infeasible {
            continue;
        }
        if best.map_or(true, |b| s.value < sols[b].value) {
            best = Some(k);
        }
    }
    let solution = match best {
        Some(b) => sols[b].clone(),
        None => {
            let mut s = sols[0].clone();
            s.message = Some("every terminal index is infeasible".into());
            s
        }
    };
    Ok(SweepResult { k_star: best, solution, values })
}

/// MinMin Lax formula: one fixed-endpoint subprogram per terminal index,
/// solved concurrently; ties go to the smallest index.
pub fn solve_phi2_sweep(instance: &ProblemInstance, grid: &TimeGrid, options: &SolverOptions) -> Result<SweepResult> {
    sweep(grid, options, |k| build_phi2_subprogram(instance, grid, k))
}

/// Direct MinMin transcription swept over terminal indices.
pub fn solve_direct_sweep(instance: &ProblemInstance, grid: &TimeGrid, options: &SolverOptions) -> Result<SweepResult> {
    sweep(grid, options, |k| build_direct_subprogram(instance, grid, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lax_transcription::{build_phi1_program, build_phi2ti_program};
    use crate::scenarios::{toy_1d, toy_drift_minmin, toy_minmax, Toy1d, ToyConstraint, ToyTerminal};
    use crate::ProblemClass;

    fn flatten(w: &[Vec<f64>]) -> Vec<f64> {
        w.iter().flatten().copied().collect()
    }

    fn unflatten(v: &[f64], shape: &[usize]) -> Vec<Vec<f64>> {
        let mut at = 0;
        shape
            .iter()
            .map(|&len| {
                at += len;
                v[at - len..at].to_vec()
            })
            .collect()
    }

    #[test]
    fn merit_gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let inst = crate::scenarios::example_a(2, 3).unwrap();
        let grid = TimeGrid::uniform(inst.horizon, 0.25).unwrap();
        let p = build_phi1_program(&inst, &grid).unwrap();
        let cones = Cones::of(&p).unwrap();
        let mut rng = rand::rngs::StdRng::seed_from_u64(5);
        let kk = p.steps();
        let mut w: Vec<Vec<f64>> =
            (0..kk).map(|_| (0..p.control_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        w.push(cones.terms.iter().map(|_| rng.gen_range(0.0..2.0)).collect());
        let nc = p.instance.model.constraint_count();
        let mult = Multipliers {
            lam: (0..=kk).map(|_| rng.gen_range(0.0..0.3)).collect(),
            nu: (0..=p.constraint_upto).map(|_| (0..nc).map(|_| rng.gen_range(0.0..0.5)).collect()).collect(),
            mem: (0..kk).map(|_| (0..p.control_dim()).map(|_| rng.gen_range(-0.5..0.5)).collect()).collect(),
            cone: cones.terms.iter().map(|(_, t)| (0..=t.rows.len()).map(|_| rng.gen_range(-0.5..0.5)).collect()).collect(),
            rho: 30.0,
        };
        let e = evaluate(&p, Some(&cones), &w, &mult, 0.0).unwrap();
        let shape: Vec<usize> = w.iter().map(Vec::len).collect();
        let x = flatten(&w);
        let g = flatten(&e.grad);
        for j in 0..x.len() {
            let h = 1e-6;
            let mut a = x.clone();
            let mut b = x.clone();
            a[j] += h;
            b[j] -= h;
            let fa = evaluate(&p, Some(&cones), &unflatten(&a, &shape), &mult, 0.0).unwrap().merit;
            let fb = evaluate(&p, Some(&cones), &unflatten(&b, &shape), &mult, 0.0).unwrap().merit;
            let fd = (fa - fb) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-5 * (1.0 + fd.abs()), "entry {j}: fd {fd} vs grad {}", g[j]);
        }
    }

    /// Brute force over piecewise-constant velocities on a coarse lattice.
    fn brute_force_minmax(x0: f64, steps: usize, dt: f64) -> f64 {
        let levels: Vec<f64> = (0..=8).map(|i| -1.0 + 0.25 * i as f64).collect();
        let mut best = f64::INFINITY;
        let total = levels.len().pow(steps as u32);
        for code in 0..total {
            let mut c = code;
            let mut x = x0;
            let mut worst = x.abs();
            for _ in 0..steps {
                x += dt * levels[c % levels.len()];
                c /= levels.len();
                worst = worst.max(x.abs());
            }
            best = best.min(worst);
        }
        best
    }

    #[test]
    fn eta_root_solves_water_filling() {
        let a = [1.0, 0.5, 0.9];
        let rho = 4.0;
        let eta = epigraph_eta(&a, rho);
        let s: f64 = a.iter().map(|v| (v - eta).max(0.0)).sum();
        assert!((s - 1.0 / rho).abs() < 1e-14);
    }

    #[test]
    fn phi1_toy_matches_brute_force() {
        let inst = toy_minmax(0.5).unwrap();
        let grid = TimeGrid::uniform(1.0, 0.25).unwrap();
        let p = build_phi1_program(&inst, &grid).unwrap();
        let sol = solve(&p, &SolverOptions::default()).unwrap();
        let oracle = brute_force_minmax(0.5, 4, 0.25);
        assert!((oracle - 0.5).abs() < 1e-12);
        assert!((sol.value - oracle).abs() < 1e-4, "{}", sol.value);
        assert!(sol.residuals.dynamics < 1e-12);
        assert_eq!(sol.label, "global");
    }

    #[test]
    fn phi2ti_drift_toy_reaches_goal() {
        let inst = toy_drift_minmin(0.0).unwrap();
        let grid = TimeGrid::uniform(1.0, 0.1).unwrap();
        let p = build_phi2ti_program(&inst, &grid).unwrap();
        let sol = solve(&p, &SolverOptions::default()).unwrap();
        assert!(sol.value.abs() < 1e-4, "{}", sol.value);
    }

    #[test]
    fn infeasible_constraint_is_reported() {
        let cfg = Toy1d { constraint: ToyConstraint::Const(1.0), ..Toy1d::default() };
        let inst = toy_1d(cfg, ProblemClass::MinMax).unwrap();
        let grid = TimeGrid::uniform(1.0, 0.25).unwrap();
        let p = build_phi1_program(&inst, &grid).unwrap();
        let sol = solve(&p, &SolverOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Infeasible);
        assert!(sol.value.is_infinite());
        let json = serde_json::to_value(&sol).unwrap();
        assert!(json["value"].is_null());
    }

    #[test]
    fn sweep_picks_earliest_zero() {
        let cfg = Toy1d { x0: 0.5, terminal: ToyTerminal::Abs { goal: 0.0 }, ..Toy1d::default() };
        let inst = toy_1d(cfg, ProblemClass::MinMin).unwrap();
        let grid = TimeGrid::uniform(1.0, 0.25).unwrap();
        let r = solve_phi2_sweep(&inst, &grid, &SolverOptions::default()).unwrap();
        assert_eq!(r.k_star, Some(2));
        assert!(r.solution.value.abs() < 1e-4);

        let cfg0 = Toy1d { x0: 0.0, ..cfg };
        let inst0 = toy_1d(cfg0, ProblemClass::MinMin).unwrap();
        let r0 = solve_phi2_sweep(&inst0, &grid, &SolverOptions::default()).unwrap();
        assert_eq!(r0.k_star, Some(0));
        assert_eq!(r0.solution.value, 0.0);
    }

    #[test]
    fn certify_flags_a_perturbed_row() {
        let inst = toy_minmax(0.5).unwrap();
        let grid = TimeGrid::uniform(1.0, 0.25).unwrap();
        let p = build_phi1_program(&inst, &grid).unwrap();
        let w = vec![vec![-0.5]; 4];
        let states = p.propagate(&w);
        let controls = p.reported_controls(&states, &w);
        let curve = p.cost_curve(&states, &w, 0.0).unwrap();
        let mut sol = Solution {
            kind: p.kind,
            status: SolveStatus::Converged,
            converged: true,
            label: "global".into(),
            value: p.objective_value(&curve),
            eta: None,
            k_star: None,
            times: grid.nodes().to_vec(),
            states,
            controls,
            cost_curve: curve,
            residuals: ResidualReport::default(),
            iterations: 0,
            outer_iterations: 0,
            penalty: 0.0,
            message: None,
            wall_time: 0.0,
            log: Vec::new(),
            decision: w,
        };
        let clean = certify(&p, &sol);
        assert!(clean.dynamics <= 1e-12 && clean.constraint <= 1e-12 && clean.objective_gap <= 1e-12);
        assert!(clean.membership <= 1e-12);
        sol.states[3][0] += 1e-3;
        let bad = certify(&p, &sol);
        assert!(bad.dynamics > 9e-4);
        assert!(matches!(bad.dynamics_step, Some(2) | Some(3)));
    }
}
