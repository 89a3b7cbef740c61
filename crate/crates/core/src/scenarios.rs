//! Builtin problem instances: the two multi-robot examples, one-dimensional
//! toys used for oracle comparisons, and a declarative affine model that
//! configuration files map onto.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LaxError, Result};
use crate::hamiltonian::ImageSet;
use crate::numerics::{dot, norm2};
use crate::problem_model::{
    ConstraintForm, ControlSet, DynamicsForm, Model, NormTerm, ProblemClass, ProblemInstance, StageCostForm,
    Structure, TerminalCostForm,
};
use crate::reconstruction::Atom;

/// Names accepted by [`builtin`].
pub const BUILTIN_NAMES: [&str; 6] = ["example_a", "example_b", "toy_1d", "toy_drift", "toy_lq", "toy_nonzero_l_minmin"];

/// `sqrt(|y|^2 + mu^2) - mu`, accumulating its gradient into `grad` with
/// the given sign per entry of `coef` (y = sum coef_i x[idx_i] - target).
fn smoothed_norm(y: &[f64], mu: f64) -> (f64, Vec<f64>) {
    let r = (dot(y, y) + mu * mu).sqrt();
    if r == 0.0 {
        return (0.0, vec![0.0; y.len()]);
    }
    (r - mu, y.iter().map(|v| v / r).collect())
}

/// Formation cost shared by both examples: leader distance to the goal plus
/// each follower's deviation from its offset relative to the leader.
#[derive(Debug, Clone)]
struct Formation {
    robots: usize,
    stride: usize,
    /// Position coordinates inside one robot block.
    pos: [usize; 2],
    goal: [f64; 2],
    offsets: Vec<[f64; 2]>,
}

impl Formation {
    fn terms(&self, x: &[f64]) -> Vec<(Vec<f64>, Option<usize>, usize)> {
        let p = |r: usize| [x[r * self.stride + self.pos[0]], x[r * self.stride + self.pos[1]]];
        let lead = p(0);
        let mut out = vec![(vec![lead[0] - self.goal[0], lead[1] - self.goal[1]], None, 0)];
        for r in 1..self.robots {
            let q = p(r);
            let o = self.offsets[r];
            out.push((vec![q[0] - lead[0] - o[0], q[1] - lead[1] - o[1]], Some(0), r));
        }
        out
    }

    fn norm_terms(&self) -> Vec<NormTerm> {
        let at = |r: usize, k: usize| r * self.stride + self.pos[k];
        let mut out = vec![NormTerm {
            weight: 1.0,
            rows: (0..2).map(|k| vec![(at(0, k), 1.0)]).collect(),
            offset: self.goal.to_vec(),
        }];
        for r in 1..self.robots {
            out.push(NormTerm {
                weight: 1.0,
                rows: (0..2).map(|k| vec![(at(r, k), 1.0), (at(0, k), -1.0)]).collect(),
                offset: self.offsets[r].to_vec(),
            });
        }
        out
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.terms(x).iter().map(|(y, _, _)| norm2(y)).sum()
    }

    fn value_grad(&self, x: &[f64], mu: f64, grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut total = 0.0;
        for (y, minus, plus) in self.terms(x) {
            let (v, g) = smoothed_norm(&y, mu);
            total += if mu == 0.0 { norm2(&y) } else { v };
            for k in 0..2 {
                grad[plus * self.stride + self.pos[k]] += g[k];
                if let Some(m) = minus {
                    grad[m * self.stride + self.pos[k]] -= g[k];
                }
            }
        }
        total
    }
}

/// Formation offsets `((r-1)·0.4R/(R-1), 0)` for robots `r = 1..R`.
pub fn formation_offsets(robots: usize) -> Vec<[f64; 2]> {
    if robots <= 1 {
        return vec![[0.0, 0.0]; robots];
    }
    let spacing = 0.4 * robots as f64 / (robots - 1) as f64;
    (0..robots).map(|r| [spacing * r as f64, 0.0]).collect()
}

/// Horizontal disturbance `0.5(1 + cos πs)`.
pub fn disturbance(s: f64) -> f64 {
    0.5 * (1.0 + (PI * s).cos())
}

/// Options for the formation-keeping MinMax example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleAOptions {
    pub robots: usize,
    pub seed: u64,
    /// Multiplier on the disturbance (0 disables it).
    pub disturbance_scale: f64,
    pub horizon: f64,
    /// Overrides the random initial state.
    pub x0: Option<Vec<f64>>,
}

impl Default for ExampleAOptions {
    fn default() -> Self {
        ExampleAOptions { robots: 3, seed: 7, disturbance_scale: 1.0, horizon: 2.0, x0: None }
    }
}

/// Double integrators steered by an acceleration of bounded magnitude and
/// bounded heading, pushed sideways by a disturbance.
#[derive(Debug, Clone)]
pub struct ExampleAModel {
    robots: usize,
    scale: f64,
    control: ControlSet,
    formation: Formation,
}

const A_HALF_ANGLE: f64 = PI / 6.0;

impl ExampleAModel {
    fn d(&self, s: f64) -> f64 {
        self.scale * disturbance(s)
    }

    /// Decomposes one robot's image point `(u2, u4)` into at most two atoms.
    fn robot_atoms(&self, s: f64, u2: f64, u4: f64) -> Vec<(Vec<f64>, f64)> {
        let v1 = u2 - self.d(s);
        let v2 = u4;
        let nv = v1.hypot(v2);
        let tan = A_HALF_ANGLE.tan();
        if v2.abs() <= tan * v1.abs() + 1e-12 || nv <= 1e-14 {
            if nv <= 1e-14 {
                return vec![(vec![0.0, 0.0], 1.0)];
            }
            let a1 = v1.signum() * nv.min(1.0);
            let a2 = (v2 / v1).atan().clamp(-A_HALF_ANGLE, A_HALF_ANGLE);
            return vec![(vec![a1, a2], 1.0)];
        }
        let s3 = 3f64.sqrt();
        let g1 = ((s3 * v2 + v1) / (2.0 * s3 * v2)).clamp(0.0, 1.0);
        let mag = (2.0 * v2).clamp(-1.0, 1.0);
        vec![(vec![mag, A_HALF_ANGLE], g1), (vec![-mag, -A_HALF_ANGLE], 1.0 - g1)]
    }
}

/// Merges per-robot atom lists into joint atoms by aligning their
/// cumulative weight partitions of `[0, 1]`; exact for decoupled robots.
fn merge_partitions(per_robot: &[Vec<(Vec<f64>, f64)>], filler: &[Vec<f64>]) -> Vec<Atom> {
    let mut cuts: Vec<f64> = vec![0.0, 1.0];
    for atoms in per_robot {
        let mut acc = 0.0;
        for (_, w) in atoms {
            acc += w;
            cuts.push(acc.min(1.0));
        }
    }
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts.dedup_by(|a, b| (*a - *b).abs() <= 1e-14);
    let mut out = Vec::new();
    for w in cuts.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        if hi - lo <= 0.0 {
            continue;
        }
        let mid = 0.5 * (lo + hi);
        let mut control = Vec::new();
        for (r, atoms) in per_robot.iter().enumerate() {
            let mut acc = 0.0;
            let mut chosen = None;
            for (a, wt) in atoms {
                if mid < acc + wt {
                    chosen = Some(a.clone());
                    break;
                }
                acc += wt;
            }
            control.extend(chosen.unwrap_or_else(|| filler[r].clone()));
        }
        out.push(Atom { control, weight: hi - lo });
    }
    out
}

impl Model for ExampleAModel {
    fn state_dim(&self) -> usize {
        4 * self.robots
    }
    fn control_dim(&self) -> usize {
        2 * self.robots
    }
    fn control_set(&self) -> &ControlSet {
        &self.control
    }
    fn structure(&self) -> Structure {
        Structure {
            stage: StageCostForm::zero(),
            terminal: TerminalCostForm { zero: false, time_invariant: true, convex: true },
            dynamics: DynamicsForm { affine: false, state_affine: true, control_only: false },
            constraint: ConstraintForm { state_independent: false, convex: true, time_invariant: true },
        }
    }
    fn dynamics(&self, s: f64, x: &[f64], a: &[f64], out: &mut [f64]) {
        let d = self.d(s);
        for r in 0..self.robots {
            let (xi, ai) = (4 * r, 2 * r);
            out[xi] = x[xi + 1];
            out[xi + 1] = a[ai] * a[ai + 1].cos() + d;
            out[xi + 2] = x[xi + 3];
            out[xi + 3] = a[ai] * a[ai + 1].sin();
        }
    }
    fn stage_cost(&self, _s: f64, _x: &[f64], _a: &[f64]) -> f64 {
        0.0
    }
    fn terminal_cost(&self, _s: f64, x: &[f64]) -> f64 {
        self.formation.value(x)
    }
    fn terminal_cost_grad(&self, _s: f64, x: &[f64], mu: f64, grad: &mut [f64]) -> f64 {
        self.formation.value_grad(x, mu, grad)
    }
    fn terminal_norms(&self, _s: f64) -> Option<Vec<NormTerm>> {
        Some(self.formation.norm_terms())
    }
    fn constraint_count(&self) -> usize {
        2 * self.robots
    }
    fn constraints(&self, _s: f64, x: &[f64], out: &mut [f64]) {
        for r in 0..self.robots {
            out[2 * r] = x[4 * r] - 5.2;
            out[2 * r + 1] = -x[4 * r + 1];
        }
    }
    fn constraint_grad(&self, s: f64, x: &[f64], j: usize, grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let r = j / 2;
        if j % 2 == 0 {
            grad[4 * r] = 1.0;
        } else {
            grad[4 * r + 1] = -1.0;
        }
        let mut c = vec![0.0; self.constraint_count()];
        self.constraints(s, x, &mut c);
        c[j]
    }
    fn drift_matrix(&self, _s: f64) -> Option<DMatrix<f64>> {
        let n = self.state_dim();
        let mut m = DMatrix::zeros(n, n);
        for r in 0..self.robots {
            m[(4 * r, 4 * r + 1)] = 1.0;
            m[(4 * r + 2, 4 * r + 3)] = 1.0;
        }
        Some(m)
    }
    fn control_image(&self, s: f64) -> Option<ImageSet> {
        let d = self.d(s);
        let part = ImageSet::BallSlab {
            offset: vec![0.0, d, 0.0, 0.0],
            axes: vec![1, 3],
            radius: 1.0,
            slab: Some((1, A_HALF_ANGLE.sin())),
        };
        Some(ImageSet::Product { parts: vec![part; self.robots] })
    }
    fn envelope(&self, _s: f64, _u: &[f64], grad: &mut [f64]) -> Option<f64> {
        grad.iter_mut().for_each(|g| *g = 0.0);
        Some(0.0)
    }
    fn hbar(&self, s: f64, x: &[f64], p: &[f64], _q: f64) -> Option<(f64, Vec<f64>)> {
        let d = self.d(s);
        let mut total = 0.0;
        let mut arg = Vec::with_capacity(2 * self.robots);
        for r in 0..self.robots {
            let xi = 4 * r;
            let (p2, p4) = (p[xi + 1], p[xi + 3]);
            let norm = p2.hypot(p4);
            // max over |a2| <= π/6 of |p2 cos a2 + p4 sin a2|.
            let term = if p4.abs() <= 0.5 * norm { norm } else { p2.abs() * 3f64.sqrt() / 2.0 + p4.abs() / 2.0 };
            total += -p[xi] * x[xi + 1] - p2 * d - p[xi + 2] * x[xi + 3] + term;
            let a2 = if p2 != 0.0 {
                (p4 / p2).atan().clamp(-A_HALF_ANGLE, A_HALF_ANGLE)
            } else {
                A_HALF_ANGLE * p4.signum()
            };
            let v = p2 * a2.cos() + p4 * a2.sin();
            arg.push(if v > 0.0 { -1.0 } else { 1.0 });
            arg.push(a2);
        }
        Some((total, arg))
    }
    fn decompose(&self, s: f64, _x: &[f64], u: &[f64], with_zero: bool) -> Option<Vec<Atom>> {
        if with_zero {
            return None;
        }
        let per: Vec<Vec<(Vec<f64>, f64)>> =
            (0..self.robots).map(|r| self.robot_atoms(s, u[4 * r + 1], u[4 * r + 3])).collect();
        let filler = vec![vec![-1.0, -A_HALF_ANGLE]; self.robots];
        Some(merge_partitions(&per, &filler))
    }
    fn dynamics_jacobian(&self, _s: f64, _x: &[f64], a: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.state_dim();
        let jx = self.drift_matrix(0.0).unwrap();
        let mut ja = DMatrix::zeros(n, 2 * self.robots);
        for r in 0..self.robots {
            let (xi, ai) = (4 * r, 2 * r);
            let (m, th) = (a[ai], a[ai + 1]);
            ja[(xi + 1, ai)] = th.cos();
            ja[(xi + 1, ai + 1)] = -m * th.sin();
            ja[(xi + 3, ai)] = th.sin();
            ja[(xi + 3, ai + 1)] = m * th.cos();
        }
        (jx, ja)
    }
    fn stage_cost_grad(&self, _s: f64, _x: &[f64], _a: &[f64], gx: &mut [f64], ga: &mut [f64]) -> f64 {
        gx.iter_mut().for_each(|g| *g = 0.0);
        ga.iter_mut().for_each(|g| *g = 0.0);
        0.0
    }
}

/// Formation-keeping MinMax example with default options and the given
/// robot count and seed.
pub fn example_a(robots: usize, seed: u64) -> Result<ProblemInstance> {
    example_a_with(&ExampleAOptions { robots, seed, ..Default::default() })
}

pub fn example_a_with(opts: &ExampleAOptions) -> Result<ProblemInstance> {
    if opts.robots == 0 {
        return Err(LaxError::Invalid("at least one robot is required".into()));
    }
    let r = opts.robots;
    let offsets = formation_offsets(r);
    let model = ExampleAModel {
        robots: r,
        scale: opts.disturbance_scale,
        control: ControlSet::Product {
            parts: vec![ControlSet::Box { lo: vec![-1.0, -A_HALF_ANGLE], hi: vec![1.0, A_HALF_ANGLE] }; r],
        },
        formation: Formation { robots: r, stride: 4, pos: [0, 2], goal: [1.0, 1.0], offsets: offsets.clone() },
    };
    let x0 = match &opts.x0 {
        Some(x) => x.clone(),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut x = Vec::with_capacity(4 * r);
            for o in &offsets {
                let vx: f64 = rng.gen_range(0.0..=0.5);
                let vy: f64 = rng.gen_range(-0.5..=0.5);
                x.extend([1.0 + o[0], vx, 1.0 + o[1], vy]);
            }
            x
        }
    };
    Ok(ProblemInstance::new("example_a", ProblemClass::MinMax, false, opts.horizon, x0, Arc::new(model))?
        .with_metadata("robots", r.into())
        .with_metadata("seed", opts.seed.into())
        .with_metadata("initial_velocity_x_range", serde_json::json!([0.0, 0.5]))
        .with_metadata("initial_velocity_y_range", serde_json::json!([-0.5, 0.5])))
}

/// Options for the time-invariant MinMin example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleBOptions {
    pub robots: usize,
    pub seed: u64,
    /// Half-width of the uniform box the initial positions are drawn from.
    pub noise_radius: f64,
    pub horizon: f64,
    pub x0: Option<Vec<f64>>,
}

impl Default for ExampleBOptions {
    fn default() -> Self {
        ExampleBOptions { robots: 2, seed: 7, noise_radius: 0.1, horizon: 2.0, x0: None }
    }
}

/// Single integrators with a constant rightward drift of 2.
#[derive(Debug, Clone)]
pub struct ExampleBModel {
    robots: usize,
    control: ControlSet,
    formation: Formation,
}

impl Model for ExampleBModel {
    fn state_dim(&self) -> usize {
        2 * self.robots
    }
    fn control_dim(&self) -> usize {
        2 * self.robots
    }
    fn control_set(&self) -> &ControlSet {
        &self.control
    }
    fn structure(&self) -> Structure {
        Structure {
            stage: StageCostForm::zero(),
            terminal: TerminalCostForm { zero: false, time_invariant: true, convex: true },
            dynamics: DynamicsForm { affine: true, state_affine: true, control_only: true },
            constraint: ConstraintForm { state_independent: false, convex: true, time_invariant: true },
        }
    }
    fn dynamics(&self, _s: f64, _x: &[f64], a: &[f64], out: &mut [f64]) {
        for r in 0..self.robots {
            out[2 * r] = a[2 * r] + 2.0;
            out[2 * r + 1] = a[2 * r + 1];
        }
    }
    fn stage_cost(&self, _s: f64, _x: &[f64], _a: &[f64]) -> f64 {
        0.0
    }
    fn terminal_cost(&self, _s: f64, x: &[f64]) -> f64 {
        self.formation.value(x)
    }
    fn terminal_cost_grad(&self, _s: f64, x: &[f64], mu: f64, grad: &mut [f64]) -> f64 {
        self.formation.value_grad(x, mu, grad)
    }
    fn terminal_norms(&self, _s: f64) -> Option<Vec<NormTerm>> {
        Some(self.formation.norm_terms())
    }
    fn constraint_count(&self) -> usize {
        2 * self.robots
    }
    fn constraints(&self, _s: f64, x: &[f64], out: &mut [f64]) {
        for r in 0..self.robots {
            out[2 * r] = x[2 * r] - 5.0;
            out[2 * r + 1] = -x[2 * r + 1];
        }
    }
    fn constraint_grad(&self, s: f64, x: &[f64], j: usize, grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        grad[j] = if j % 2 == 0 { 1.0 } else { -1.0 };
        let mut c = vec![0.0; self.constraint_count()];
        self.constraints(s, x, &mut c);
        c[j]
    }
    fn drift_matrix(&self, _s: f64) -> Option<DMatrix<f64>> {
        Some(DMatrix::zeros(2 * self.robots, 2 * self.robots))
    }
    fn control_image(&self, _s: f64) -> Option<ImageSet> {
        let lo = (0..self.robots).flat_map(|_| [1.0, -1.0]).collect();
        let hi = (0..self.robots).flat_map(|_| [3.0, 1.0]).collect();
        Some(ImageSet::Box { lo, hi })
    }
    fn envelope(&self, _s: f64, _u: &[f64], grad: &mut [f64]) -> Option<f64> {
        grad.iter_mut().for_each(|g| *g = 0.0);
        Some(0.0)
    }
    fn hbar(&self, _s: f64, _x: &[f64], p: &[f64], _q: f64) -> Option<(f64, Vec<f64>)> {
        let mut total = 0.0;
        let mut arg = Vec::with_capacity(p.len());
        for r in 0..self.robots {
            let (p1, p2) = (p[2 * r], p[2 * r + 1]);
            total += -2.0 * p1 + p1.abs() + p2.abs();
            arg.push(if p1 > 0.0 { -1.0 } else { 1.0 });
            arg.push(if p2 > 0.0 { -1.0 } else { 1.0 });
        }
        Some((total, arg))
    }
    fn decompose(&self, _s: f64, _x: &[f64], u: &[f64], with_zero: bool) -> Option<Vec<Atom>> {
        let in_box = (0..self.robots).all(|r| {
            u[2 * r] >= 1.0 - 1e-12 && u[2 * r] <= 3.0 + 1e-12 && u[2 * r + 1].abs() <= 1.0 + 1e-12
        });
        let gamma = if in_box || !with_zero {
            1.0
        } else {
            (0..self.robots).map(|r| u[2 * r]).fold(f64::INFINITY, f64::min).clamp(0.0, 1.0)
        };
        if gamma <= 1e-14 {
            return Some(Vec::new());
        }
        let a: Vec<f64> = (0..self.robots)
            .flat_map(|r| [u[2 * r] / gamma - 2.0, u[2 * r + 1] / gamma])
            .collect();
        Some(vec![Atom { control: self.control.project(&a), weight: gamma }])
    }
    fn dynamics_jacobian(&self, _s: f64, _x: &[f64], _a: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.state_dim();
        (DMatrix::zeros(n, n), DMatrix::identity(n, n))
    }
    fn stage_cost_grad(&self, _s: f64, _x: &[f64], _a: &[f64], gx: &mut [f64], ga: &mut [f64]) -> f64 {
        gx.iter_mut().for_each(|g| *g = 0.0);
        ga.iter_mut().for_each(|g| *g = 0.0);
        0.0
    }
}

pub fn example_b(robots: usize, seed: u64) -> Result<ProblemInstance> {
    example_b_with(&ExampleBOptions { robots, seed, ..Default::default() })
}

pub fn example_b_with(opts: &ExampleBOptions) -> Result<ProblemInstance> {
    if opts.robots == 0 {
        return Err(LaxError::Invalid("at least one robot is required".into()));
    }
    let r = opts.robots;
    let offsets = formation_offsets(r);
    let model = ExampleBModel {
        robots: r,
        control: ControlSet::Box { lo: vec![-1.0; 2 * r], hi: vec![1.0; 2 * r] },
        formation: Formation { robots: r, stride: 2, pos: [0, 1], goal: [1.0, 1.0], offsets: offsets.clone() },
    };
    let x0 = match &opts.x0 {
        Some(x) => x.clone(),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let w = opts.noise_radius;
            let mut x = Vec::with_capacity(2 * r);
            for o in &offsets {
                let dx: f64 = if w > 0.0 { rng.gen_range(-w..=w) } else { 0.0 };
                let dy: f64 = if w > 0.0 { rng.gen_range(-w..=w) } else { 0.0 };
                x.extend([1.0 + o[0] + dx, 1.0 + o[1] + dy]);
            }
            x
        }
    };
    Ok(ProblemInstance::new("example_b", ProblemClass::MinMin, true, opts.horizon, x0, Arc::new(model))?
        .with_metadata("robots", r.into())
        .with_metadata("seed", opts.seed.into())
        .with_metadata("initial_noise_radius", opts.noise_radius.into()))
}

/// Terminal cost of the one-dimensional toys.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ToyTerminal {
    Zero,
    /// `|x - goal|`.
    Abs { goal: f64 },
    /// `x^2`.
    Square,
}

/// State constraint of the one-dimensional toys.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum ToyConstraint {
    /// `c ≡ v`.
    Const(f64),
    /// `x - b`.
    Upper(f64),
    /// `b - x`.
    Lower(f64),
}

/// `ẋ = a + drift`, `a in [-1,1]`, `L = weight·a^2 + stage_offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Toy1d {
    pub x0: f64,
    pub horizon: f64,
    pub drift: f64,
    pub weight: f64,
    pub stage_offset: f64,
    pub terminal: ToyTerminal,
    pub constraint: ToyConstraint,
}

impl Default for Toy1d {
    fn default() -> Self {
        Toy1d {
            x0: 0.0,
            horizon: 1.0,
            drift: 0.0,
            weight: 0.0,
            stage_offset: 0.0,
            terminal: ToyTerminal::Abs { goal: 0.0 },
            constraint: ToyConstraint::Upper(2.0),
        }
    }
}

#[derive(Debug, Clone)]
struct Toy1dModel {
    cfg: Toy1d,
    control: ControlSet,
}

impl Model for Toy1dModel {
    fn state_dim(&self) -> usize {
        1
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn control_set(&self) -> &ControlSet {
        &self.control
    }
    fn structure(&self) -> Structure {
        let c = &self.cfg;
        let zero = c.weight == 0.0 && c.stage_offset == 0.0;
        Structure {
            stage: StageCostForm {
                zero,
                separable: true,
                state_part_zero: true,
                state_part_convex: true,
                control_part_convex: c.weight >= 0.0,
            },
            terminal: TerminalCostForm { zero: c.terminal == ToyTerminal::Zero, time_invariant: true, convex: true },
            dynamics: DynamicsForm { affine: true, state_affine: true, control_only: true },
            constraint: ConstraintForm {
                state_independent: matches!(c.constraint, ToyConstraint::Const(_)),
                convex: true,
                time_invariant: true,
            },
        }
    }
    fn dynamics(&self, _s: f64, _x: &[f64], a: &[f64], out: &mut [f64]) {
        out[0] = a[0] + self.cfg.drift;
    }
    fn stage_cost(&self, _s: f64, _x: &[f64], a: &[f64]) -> f64 {
        self.cfg.weight * a[0] * a[0] + self.cfg.stage_offset
    }
    fn terminal_cost(&self, _s: f64, x: &[f64]) -> f64 {
        match self.cfg.terminal {
            ToyTerminal::Zero => 0.0,
            ToyTerminal::Abs { goal } => (x[0] - goal).abs(),
            ToyTerminal::Square => x[0] * x[0],
        }
    }
    fn terminal_cost_grad(&self, s: f64, x: &[f64], mu: f64, grad: &mut [f64]) -> f64 {
        match self.cfg.terminal {
            ToyTerminal::Zero => {
                grad[0] = 0.0;
                0.0
            }
            ToyTerminal::Abs { goal } => {
                let (v, g) = smoothed_norm(&[x[0] - goal], mu);
                grad[0] = g[0];
                if mu == 0.0 {
                    self.terminal_cost(s, x)
                } else {
                    v
                }
            }
            ToyTerminal::Square => {
                grad[0] = 2.0 * x[0];
                x[0] * x[0]
            }
        }
    }
    fn terminal_norms(&self, _s: f64) -> Option<Vec<NormTerm>> {
        match self.cfg.terminal {
            ToyTerminal::Zero => Some(Vec::new()),
            ToyTerminal::Abs { goal } => Some(vec![NormTerm { weight: 1.0, rows: vec![vec![(0, 1.0)]], offset: vec![goal] }]),
            ToyTerminal::Square => None,
        }
    }
    fn constraint_count(&self) -> usize {
        1
    }
    fn constraints(&self, _s: f64, x: &[f64], out: &mut [f64]) {
        out[0] = match self.cfg.constraint {
            ToyConstraint::Const(v) => v,
            ToyConstraint::Upper(b) => x[0] - b,
            ToyConstraint::Lower(b) => b - x[0],
        };
    }
    fn constraint_grad(&self, s: f64, x: &[f64], _j: usize, grad: &mut [f64]) -> f64 {
        grad[0] = match self.cfg.constraint {
            ToyConstraint::Const(_) => 0.0,
            ToyConstraint::Upper(_) => 1.0,
            ToyConstraint::Lower(_) => -1.0,
        };
        let mut c = [0.0];
        self.constraints(s, x, &mut c);
        c[0]
    }
    fn drift_matrix(&self, _s: f64) -> Option<DMatrix<f64>> {
        Some(DMatrix::zeros(1, 1))
    }
    fn control_image(&self, _s: f64) -> Option<ImageSet> {
        Some(ImageSet::Box { lo: vec![self.cfg.drift - 1.0], hi: vec![self.cfg.drift + 1.0] })
    }
    fn stage_cost_control(&self, s: f64, a: &[f64]) -> f64 {
        self.stage_cost(s, &[0.0], a)
    }
    fn envelope(&self, _s: f64, u: &[f64], grad: &mut [f64]) -> Option<f64> {
        let a = u[0] - self.cfg.drift;
        grad[0] = 2.0 * self.cfg.weight * a;
        Some(self.cfg.weight * a * a + self.cfg.stage_offset)
    }
    fn hbar(&self, _s: f64, _x: &[f64], p: &[f64], q: f64) -> Option<(f64, Vec<f64>)> {
        let w = self.cfg.weight;
        let val = |a: f64| -p[0] * (a + self.cfg.drift) + q * (w * a * a + self.cfg.stage_offset);
        let mut cands = vec![-1.0, 1.0];
        if q * w != 0.0 {
            cands.push((p[0] / (2.0 * q * w)).clamp(-1.0, 1.0));
        }
        let mut best = (val(cands[0]), cands[0]);
        for &a in &cands[1..] {
            if val(a) > best.0 {
                best = (val(a), a);
            }
        }
        Some((best.0, vec![best.1]))
    }
    fn decompose(&self, _s: f64, _x: &[f64], u: &[f64], with_zero: bool) -> Option<Vec<Atom>> {
        let (lo, hi) = (self.cfg.drift - 1.0, self.cfg.drift + 1.0);
        let w = u[0];
        if (lo - 1e-12..=hi + 1e-12).contains(&w) || !with_zero {
            let a = (w - self.cfg.drift).clamp(-1.0, 1.0);
            return Some(vec![Atom { control: vec![a], weight: 1.0 }]);
        }
        if w.abs() <= 1e-14 {
            return Some(Vec::new());
        }
        // w = λ v with v in [lo, hi] and λ in (0, 1]; take the λ that
        // minimises the perspective cost λ·L(v - drift).
        let (vmin, vmax) = if w > 0.0 { (lo.max(w), hi) } else { (lo, hi.min(w)) };
        let (l_lo, l_hi) = {
            let a = w / vmax;
            let b = w / vmin;
            (a.min(b).max(0.0), a.max(b).min(1.0))
        };
        let cost = |l: f64| {
            let a = (w / l - self.cfg.drift).clamp(-1.0, 1.0);
            l * (self.cfg.weight * a * a + self.cfg.stage_offset)
        };
        let (l, _) = crate::numerics::golden_min(cost, l_lo.max(1e-12), l_hi, 200);
        let a = (w / l - self.cfg.drift).clamp(-1.0, 1.0);
        Some(vec![Atom { control: vec![a], weight: l }])
    }
    fn dynamics_jacobian(&self, _s: f64, _x: &[f64], _a: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        (DMatrix::zeros(1, 1), DMatrix::identity(1, 1))
    }
    fn stage_cost_grad(&self, _s: f64, _x: &[f64], a: &[f64], gx: &mut [f64], ga: &mut [f64]) -> f64 {
        gx[0] = 0.0;
        ga[0] = 2.0 * self.cfg.weight * a[0];
        self.cfg.weight * a[0] * a[0] + self.cfg.stage_offset
    }
}

/// A one-dimensional toy instance; toys are always time-invariant.
pub fn toy_1d(cfg: Toy1d, class: ProblemClass) -> Result<ProblemInstance> {
    let model = Toy1dModel { cfg, control: ControlSet::Box { lo: vec![-1.0], hi: vec![1.0] } };
    ProblemInstance::new("toy_1d", class, true, cfg.horizon, vec![cfg.x0], Arc::new(model))
}

/// `f = a`, `L = 0`, `g = |x|`, `c = x - 2`, `T = 1`, MinMax.
pub fn toy_minmax(x0: f64) -> Result<ProblemInstance> {
    let mut inst = toy_1d(Toy1d { x0, ..Toy1d::default() }, ProblemClass::MinMax)?;
    inst.name = "toy_1d".into();
    Ok(inst)
}

/// `f = a + 2`, `L = 0`, `g = |x - 1|`, `c = x - 2`, `T = 1`, MinMin.
pub fn toy_drift_minmin(x0: f64) -> Result<ProblemInstance> {
    let mut inst = toy_1d(
        Toy1d { x0, drift: 2.0, terminal: ToyTerminal::Abs { goal: 1.0 }, ..Toy1d::default() },
        ProblemClass::MinMin,
    )?;
    inst.name = "toy_drift".into();
    Ok(inst)
}

/// `f = a`, `L = a^2`, `g = x^2`, `c ≡ -1`, `T = 1`, MinMax.
pub fn toy_lq(x0: f64) -> Result<ProblemInstance> {
    let mut inst = toy_1d(
        Toy1d { x0, weight: 1.0, terminal: ToyTerminal::Square, constraint: ToyConstraint::Const(-1.0), ..Toy1d::default() },
        ProblemClass::MinMax,
    )?;
    inst.name = "toy_lq".into();
    Ok(inst)
}

/// `f = a`, `L = a^2`, `g = |x|`, `c = x - 2`, `T = 1`, MinMin.
pub fn toy_nonzero_l_minmin(x0: f64) -> Result<ProblemInstance> {
    let mut inst = toy_1d(Toy1d { x0, weight: 1.0, ..Toy1d::default() }, ProblemClass::MinMin)?;
    inst.name = "toy_nonzero_l_minmin".into();
    Ok(inst)
}

/// `f = a^2`, `L = a`, `a in [-1,1]`: the image is `[0,1]` and the lifted
/// cost envelope is `-sqrt(u)`, strictly below `L` at every preimage `a > 0`.
#[derive(Debug, Clone)]
struct SquaredInputModel {
    control: ControlSet,
}

impl Model for SquaredInputModel {
    fn state_dim(&self) -> usize {
        1
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn control_set(&self) -> &ControlSet {
        &self.control
    }
    fn structure(&self) -> Structure {
        Structure {
            stage: StageCostForm {
                zero: false,
                separable: true,
                state_part_zero: true,
                state_part_convex: true,
                control_part_convex: true,
            },
            terminal: TerminalCostForm { zero: false, time_invariant: true, convex: true },
            dynamics: DynamicsForm { affine: false, state_affine: true, control_only: true },
            constraint: ConstraintForm { state_independent: true, convex: true, time_invariant: true },
        }
    }
    fn dynamics(&self, _s: f64, _x: &[f64], a: &[f64], out: &mut [f64]) {
        out[0] = a[0] * a[0];
    }
    fn stage_cost(&self, _s: f64, _x: &[f64], a: &[f64]) -> f64 {
        a[0]
    }
    fn terminal_cost(&self, _s: f64, x: &[f64]) -> f64 {
        x[0].abs()
    }
    fn terminal_cost_grad(&self, _s: f64, x: &[f64], mu: f64, grad: &mut [f64]) -> f64 {
        let (v, g) = smoothed_norm(x, mu);
        grad[0] = g[0];
        if mu == 0.0 {
            x[0].abs()
        } else {
            v
        }
    }
    fn terminal_norms(&self, _s: f64) -> Option<Vec<NormTerm>> {
        Some(vec![NormTerm { weight: 1.0, rows: vec![vec![(0, 1.0)]], offset: vec![0.0] }])
    }
    fn constraint_count(&self) -> usize {
        1
    }
    fn constraints(&self, _s: f64, _x: &[f64], out: &mut [f64]) {
        out[0] = -1.0;
    }
    fn constraint_grad(&self, _s: f64, _x: &[f64], _j: usize, grad: &mut [f64]) -> f64 {
        grad[0] = 0.0;
        -1.0
    }
    fn drift_matrix(&self, _s: f64) -> Option<DMatrix<f64>> {
        Some(DMatrix::zeros(1, 1))
    }
    fn control_image(&self, _s: f64) -> Option<ImageSet> {
        Some(ImageSet::Box { lo: vec![0.0], hi: vec![1.0] })
    }
    fn stage_cost_control(&self, _s: f64, a: &[f64]) -> f64 {
        a[0]
    }
    fn envelope(&self, _s: f64, u: &[f64], grad: &mut [f64]) -> Option<f64> {
        let r = u[0].max(0.0).sqrt();
        grad[0] = if r > 1e-12 { -0.5 / r } else { -1e12 };
        Some(-r)
    }
    fn hbar(&self, _s: f64, _x: &[f64], p: &[f64], q: f64) -> Option<(f64, Vec<f64>)> {
        let val = |a: f64| -p[0] * a * a + q * a;
        let mut cands = vec![-1.0, 1.0, 0.0];
        if p[0] != 0.0 {
            cands.push((q / (2.0 * p[0])).clamp(-1.0, 1.0));
        }
        let mut best = (val(cands[0]), cands[0]);
        for &a in &cands[1..] {
            if val(a) > best.0 {
                best = (val(a), a);
            }
        }
        Some((best.0, vec![best.1]))
    }
}

/// Instance whose lifted cost is not convex along the image, so the primal
/// and conjugate-side Hamiltonians differ for positive `q`.
pub fn toy_squared_input() -> Result<ProblemInstance> {
    let model = SquaredInputModel { control: ControlSet::Box { lo: vec![-1.0], hi: vec![1.0] } };
    ProblemInstance::new("toy_squared_input", ProblemClass::MinMax, true, 1.0, vec![0.0], Arc::new(model))
}

/// Builds a builtin scenario by name.
pub fn builtin(name: &str, robots: usize, seed: u64) -> Result<ProblemInstance> {
    match name {
        "example_a" => example_a(robots, seed),
        "example_b" => example_b(robots, seed),
        "toy_1d" => toy_minmax(0.5),
        "toy_drift" => toy_drift_minmin(0.0),
        "toy_lq" => toy_lq(0.5),
        "toy_nonzero_l_minmin" => toy_nonzero_l_minmin(0.5),
        other => Err(LaxError::Invalid(format!("unknown scenario '{other}', expected one of {}", BUILTIN_NAMES.join(", ")))),
    }
}

/// Stage cost of a declarative model, `sum q_i x_i^2 + sum r_j a_j^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StageSpec {
    #[default]
    Zero,
    Quadratic { state_weights: Vec<f64>, control_weights: Vec<f64> },
}

/// Terminal cost of a declarative model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TerminalSpec {
    Zero,
    /// `|x[coords] - target|_2`; empty `coords` means all coordinates.
    Norm { target: Vec<f64>, #[serde(default)] coords: Vec<usize> },
    /// `sum w_i (x_i - target_i)^2`.
    Quadratic { target: Vec<f64>, weights: Vec<f64> },
}

/// `coeffs·x - rhs <= 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineConstraint {
    pub coeffs: Vec<f64>,
    pub rhs: f64,
}

/// `ẋ = M x + N a + C` with box or ball controls, quadratic or norm costs
/// and affine constraints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeclarativeSpec {
    pub drift_matrix: Vec<Vec<f64>>,
    pub input_matrix: Vec<Vec<f64>>,
    #[serde(default)]
    pub offset: Vec<f64>,
    pub control_set: ControlSet,
    #[serde(default)]
    pub stage_cost: StageSpec,
    pub terminal_cost: TerminalSpec,
    #[serde(default)]
    pub constraints: Vec<AffineConstraint>,
}

#[derive(Debug, Clone)]
struct DeclarativeModel {
    spec: DeclarativeSpec,
    n: usize,
    m: usize,
    /// Row hit by each input column when `N` is a coordinate embedding.
    embedding: Option<Vec<usize>>,
    image: ImageSet,
}

impl DeclarativeModel {
    fn q(&self) -> Vec<f64> {
        match &self.spec.stage_cost {
            StageSpec::Zero => vec![0.0; self.n],
            StageSpec::Quadratic { state_weights, .. } => state_weights.clone(),
        }
    }
    fn r(&self) -> Vec<f64> {
        match &self.spec.stage_cost {
            StageSpec::Zero => vec![0.0; self.m],
            StageSpec::Quadratic { control_weights, .. } => control_weights.clone(),
        }
    }
    fn offset(&self, i: usize) -> f64 {
        self.spec.offset.get(i).copied().unwrap_or(0.0)
    }
}

impl Model for DeclarativeModel {
    fn state_dim(&self) -> usize {
        self.n
    }
    fn control_dim(&self) -> usize {
        self.m
    }
    fn control_set(&self) -> &ControlSet {
        &self.spec.control_set
    }
    fn structure(&self) -> Structure {
        let q = self.q();
        let r = self.r();
        let m_zero = self.spec.drift_matrix.iter().flatten().all(|v| *v == 0.0);
        Structure {
            stage: StageCostForm {
                zero: q.iter().chain(&r).all(|v| *v == 0.0),
                separable: true,
                state_part_zero: q.iter().all(|v| *v == 0.0),
                state_part_convex: q.iter().all(|v| *v >= 0.0),
                control_part_convex: r.iter().all(|v| *v >= 0.0),
            },
            terminal: TerminalCostForm {
                zero: matches!(self.spec.terminal_cost, TerminalSpec::Zero),
                time_invariant: true,
                convex: match &self.spec.terminal_cost {
                    TerminalSpec::Quadratic { weights, .. } => weights.iter().all(|w| *w >= 0.0),
                    _ => true,
                },
            },
            dynamics: DynamicsForm { affine: true, state_affine: true, control_only: m_zero },
            constraint: ConstraintForm {
                state_independent: self.spec.constraints.iter().all(|c| c.coeffs.iter().all(|v| *v == 0.0)),
                convex: true,
                time_invariant: true,
            },
        }
    }
    fn dynamics(&self, _s: f64, x: &[f64], a: &[f64], out: &mut [f64]) {
        for i in 0..self.n {
            out[i] = dot(&self.spec.drift_matrix[i], x) + dot(&self.spec.input_matrix[i], a) + self.offset(i);
        }
    }
    fn stage_cost(&self, _s: f64, x: &[f64], a: &[f64]) -> f64 {
        let q = self.q();
        let r = self.r();
        x.iter().zip(&q).map(|(v, w)| w * v * v).sum::<f64>() + a.iter().zip(&r).map(|(v, w)| w * v * v).sum::<f64>()
    }
    fn terminal_cost(&self, s: f64, x: &[f64]) -> f64 {
        let mut g = vec![0.0; self.n];
        self.terminal_cost_grad(s, x, 0.0, &mut g)
    }
    fn terminal_cost_grad(&self, _s: f64, x: &[f64], mu: f64, grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        match &self.spec.terminal_cost {
            TerminalSpec::Zero => 0.0,
            TerminalSpec::Norm { target, coords } => {
                let idx: Vec<usize> = if coords.is_empty() { (0..self.n).collect() } else { coords.clone() };
                let y: Vec<f64> = idx.iter().zip(target).map(|(&i, t)| x[i] - t).collect();
                let (v, g) = smoothed_norm(&y, mu);
                for (k, &i) in idx.iter().enumerate() {
                    grad[i] += g[k];
                }
                if mu == 0.0 {
                    norm2(&y)
                } else {
                    v
                }
            }
            TerminalSpec::Quadratic { target, weights } => {
                let mut v = 0.0;
                for i in 0..self.n {
                    let d = x[i] - target[i];
                    v += weights[i] * d * d;
                    grad[i] = 2.0 * weights[i] * d;
                }
                v
            }
        }
    }
    fn terminal_norms(&self, _s: f64) -> Option<Vec<NormTerm>> {
        match &self.spec.terminal_cost {
            TerminalSpec::Zero => Some(Vec::new()),
            TerminalSpec::Norm { target, coords } => {
                let idx: Vec<usize> = if coords.is_empty() { (0..self.n).collect() } else { coords.clone() };
                Some(vec![NormTerm {
                    weight: 1.0,
                    rows: idx.iter().map(|&i| vec![(i, 1.0)]).collect(),
                    offset: target.clone(),
                }])
            }
            TerminalSpec::Quadratic { .. } => None,
        }
    }
    fn constraint_count(&self) -> usize {
        self.spec.constraints.len().max(1)
    }
    fn constraints(&self, _s: f64, x: &[f64], out: &mut [f64]) {
        if self.spec.constraints.is_empty() {
            out[0] = -1.0;
            return;
        }
        for (o, c) in out.iter_mut().zip(&self.spec.constraints) {
            *o = dot(&c.coeffs, x) - c.rhs;
        }
    }
    fn constraint_grad(&self, _s: f64, x: &[f64], j: usize, grad: &mut [f64]) -> f64 {
        match self.spec.constraints.get(j) {
            None => {
                grad.iter_mut().for_each(|g| *g = 0.0);
                -1.0
            }
            Some(c) => {
                grad.copy_from_slice(&c.coeffs);
                dot(&c.coeffs, x) - c.rhs
            }
        }
    }
    fn drift_matrix(&self, _s: f64) -> Option<DMatrix<f64>> {
        Some(DMatrix::from_fn(self.n, self.n, |i, j| self.spec.drift_matrix[i][j]))
    }
    fn control_image(&self, _s: f64) -> Option<ImageSet> {
        Some(self.image.clone())
    }
    fn stage_cost_state(&self, _s: f64, x: &[f64], grad: &mut [f64]) -> f64 {
        let q = self.q();
        let mut v = 0.0;
        for i in 0..self.n {
            grad[i] = 2.0 * q[i] * x[i];
            v += q[i] * x[i] * x[i];
        }
        v
    }
    fn stage_cost_control(&self, _s: f64, a: &[f64]) -> f64 {
        a.iter().zip(&self.r()).map(|(v, w)| w * v * v).sum()
    }
    fn envelope(&self, _s: f64, u: &[f64], grad: &mut [f64]) -> Option<f64> {
        let r = self.r();
        grad.iter_mut().for_each(|g| *g = 0.0);
        if r.iter().all(|w| *w == 0.0) {
            return Some(0.0);
        }
        let emb = self.embedding.as_ref()?;
        let mut v = 0.0;
        for (j, &row) in emb.iter().enumerate() {
            let a = u[row] - self.offset(row);
            v += r[j] * a * a;
            grad[row] = 2.0 * r[j] * a;
        }
        Some(v)
    }
    fn hbar(&self, _s: f64, x: &[f64], p: &[f64], q: f64) -> Option<(f64, Vec<f64>)> {
        let npx: Vec<f64> = (0..self.m).map(|j| -(0..self.n).map(|i| p[i] * self.spec.input_matrix[i][j]).sum::<f64>()).collect();
        let mut mx = vec![0.0; self.n];
        for i in 0..self.n {
            mx[i] = dot(&self.spec.drift_matrix[i], x) + self.offset(i);
        }
        let qw = self.q();
        let base = -dot(p, &mx) + q * x.iter().zip(&qw).map(|(v, w)| w * v * v).sum::<f64>();
        let r = self.r();
        match &self.spec.control_set {
            ControlSet::Box { lo, hi } => {
                let mut total = base;
                let mut arg = Vec::with_capacity(self.m);
                for j in 0..self.m {
                    let val = |a: f64| npx[j] * a + q * r[j] * a * a;
                    let mut cands = vec![lo[j], hi[j]];
                    if q * r[j] != 0.0 {
                        cands.push((-npx[j] / (2.0 * q * r[j])).clamp(lo[j], hi[j]));
                    }
                    let best = cands.iter().copied().fold((f64::NEG_INFINITY, lo[j]), |b, a| if val(a) > b.0 { (val(a), a) } else { b });
                    total += best.0;
                    arg.push(best.1);
                }
                Some((total, arg))
            }
            ControlSet::Ball { center, radius } if q == 0.0 || r.iter().all(|w| *w == 0.0) => {
                let nn = norm2(&npx);
                let arg: Vec<f64> = center
                    .iter()
                    .zip(&npx)
                    .map(|(c, g)| if nn > 0.0 { c + radius * g / nn } else { *c })
                    .collect();
                Some((base + dot(&npx, center) + radius * nn, arg))
            }
            _ => None,
        }
    }
    fn decompose(&self, _s: f64, _x: &[f64], u: &[f64], with_zero: bool) -> Option<Vec<Atom>> {
        if with_zero {
            return None;
        }
        let emb = self.embedding.as_ref()?;
        let a: Vec<f64> = emb.iter().map(|&row| u[row] - self.offset(row)).collect();
        Some(vec![Atom { control: self.spec.control_set.project(&a), weight: 1.0 }])
    }
    fn dynamics_jacobian(&self, _s: f64, _x: &[f64], _a: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        (
            DMatrix::from_fn(self.n, self.n, |i, j| self.spec.drift_matrix[i][j]),
            DMatrix::from_fn(self.n, self.m, |i, j| self.spec.input_matrix[i][j]),
        )
    }
    fn stage_cost_grad(&self, s: f64, x: &[f64], a: &[f64], gx: &mut [f64], ga: &mut [f64]) -> f64 {
        let r = self.r();
        self.stage_cost_state(s, x, gx);
        for j in 0..self.m {
            ga[j] = 2.0 * r[j] * a[j];
        }
        self.stage_cost(s, x, a)
    }
}

/// Builds an instance from a declarative description, checking every
/// dimension and restricting to forms the transcription supports.
pub fn declarative(
    name: &str,
    spec: DeclarativeSpec,
    class: ProblemClass,
    time_invariant: bool,
    horizon: f64,
    x0: Vec<f64>,
) -> Result<ProblemInstance> {
    let n = spec.drift_matrix.len();
    if n == 0 || spec.drift_matrix.iter().any(|r| r.len() != n) {
        return Err(LaxError::Dimension("drift_matrix must be square and non-empty".into()));
    }
    if spec.input_matrix.len() != n {
        return Err(LaxError::Dimension("input_matrix needs one row per state".into()));
    }
    let m = spec.input_matrix[0].len();
    if m == 0 || spec.input_matrix.iter().any(|r| r.len() != m) {
        return Err(LaxError::Dimension("input_matrix rows must share a non-zero length".into()));
    }
    if !spec.offset.is_empty() && spec.offset.len() != n {
        return Err(LaxError::Dimension("offset must be empty or have one entry per state".into()));
    }
    spec.control_set.validate()?;
    if spec.control_set.dim() != m {
        return Err(LaxError::Dimension("control_set dimension differs from input_matrix columns".into()));
    }
    if let StageSpec::Quadratic { state_weights, control_weights } = &spec.stage_cost {
        if state_weights.len() != n || control_weights.len() != m {
            return Err(LaxError::Dimension("stage_cost weights have the wrong length".into()));
        }
    }
    match &spec.terminal_cost {
        TerminalSpec::Norm { target, coords } => {
            let len = if coords.is_empty() { n } else { coords.len() };
            if target.len() != len || coords.iter().any(|&i| i >= n) {
                return Err(LaxError::Dimension("terminal_cost target/coords mismatch".into()));
            }
        }
        TerminalSpec::Quadratic { target, weights } => {
            if target.len() != n || weights.len() != n {
                return Err(LaxError::Dimension("terminal_cost target/weights mismatch".into()));
            }
        }
        TerminalSpec::Zero => {}
    }
    if spec.constraints.iter().any(|c| c.coeffs.len() != n) {
        return Err(LaxError::Dimension("constraint coefficients need one entry per state".into()));
    }
    let mut rows = Vec::with_capacity(m);
    for j in 0..m {
        let hits: Vec<usize> = (0..n).filter(|&i| spec.input_matrix[i][j] != 0.0).collect();
        if hits.len() == 1 && spec.input_matrix[hits[0]][j] == 1.0 && !rows.contains(&hits[0]) {
            rows.push(hits[0]);
        } else {
            break;
        }
    }
    let embedding = (rows.len() == m).then_some(rows);
    let off = |i: usize| spec.offset.get(i).copied().unwrap_or(0.0);
    let image = match (&spec.control_set, &embedding) {
        (ControlSet::Box { lo, hi }, Some(emb)) => {
            let mut l: Vec<f64> = (0..n).map(off).collect();
            let mut h = l.clone();
            for (j, &row) in emb.iter().enumerate() {
                l[row] += lo[j];
                h[row] += hi[j];
            }
            ImageSet::Box { lo: l, hi: h }
        }
        (ControlSet::Ball { center, radius }, Some(emb)) => {
            let mut o: Vec<f64> = (0..n).map(off).collect();
            for (j, &row) in emb.iter().enumerate() {
                o[row] += center[j];
            }
            ImageSet::BallSlab { offset: o, axes: emb.clone(), radius: *radius, slab: None }
        }
        (ControlSet::Box { .. }, None) if m <= 12 => {
            let corners = match &spec.control_set {
                ControlSet::Box { lo, hi } => (0..(1usize << m))
                    .map(|mask| (0..m).map(|j| if mask >> j & 1 == 1 { hi[j] } else { lo[j] }).collect::<Vec<f64>>())
                    .collect::<Vec<_>>(),
                _ => unreachable!(),
            };
            let vertices = corners
                .iter()
                .map(|a| (0..n).map(|i| dot(&spec.input_matrix[i], a) + off(i)).collect())
                .collect();
            ImageSet::Polytope { vertices }
        }
        _ => {
            return Err(LaxError::Unsupported(
                "control_set: only boxes (any input matrix, up to 12 inputs) or balls with a coordinate-embedding input matrix are supported".into(),
            ))
        }
    };
    let model = DeclarativeModel { spec, n, m, embedding, image };
    ProblemInstance::new(name, class, time_invariant, horizon, x0, Arc::new(model))
}
