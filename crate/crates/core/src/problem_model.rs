//! Problem instances, time grids and trajectories, together with the exact
//! evaluators of the min-max and min-min objectives and of state-constraint
//! feasibility.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{LaxError, Result};
use crate::hamiltonian::ImageSet;
use crate::numerics::{dist2, dot, norm2, project_hull};
use crate::reconstruction::{Atom, PiecewiseControl};

/// Which of the two problem classes an instance belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemClass {
    /// `inf_α max_τ`, state constraint on the whole horizon.
    MinMax,
    /// `inf_α min_τ`, state constraint on `[0, τ]` only.
    MinMin,
}

/// Declared shape of the stage cost `L`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StageCostForm {
    pub zero: bool,
    /// `L(s,x,a) = L^x(s,x) + L^a(s,a)`.
    pub separable: bool,
    pub state_part_zero: bool,
    pub state_part_convex: bool,
    pub control_part_convex: bool,
}

impl StageCostForm {
    pub fn zero() -> Self {
        StageCostForm {
            zero: true,
            separable: true,
            state_part_zero: true,
            state_part_convex: true,
            control_part_convex: true,
        }
    }
}

/// Declared shape of the terminal cost `g`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TerminalCostForm {
    pub zero: bool,
    pub time_invariant: bool,
    pub convex: bool,
}

/// Declared shape of the dynamics `f`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DynamicsForm {
    /// `f = M(s)x + N(s)a + C(s)`.
    pub affine: bool,
    /// `f = M(s)x + f^a(s,a)`.
    pub state_affine: bool,
    /// `f = f^a(a)`: no dependence on time or state.
    pub control_only: bool,
}

/// Declared shape of the state constraint `c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConstraintForm {
    /// `c = c(s)`.
    pub state_independent: bool,
    pub convex: bool,
    pub time_invariant: bool,
}

/// Structural metadata used by the convexity audit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Structure {
    pub stage: StageCostForm,
    pub terminal: TerminalCostForm,
    pub dynamics: DynamicsForm,
    pub constraint: ConstraintForm,
}

/// Compact convex control set `A`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControlSet {
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
    Polytope { vertices: Vec<Vec<f64>> },
    Product { parts: Vec<ControlSet> },
}

impl ControlSet {
    pub fn dim(&self) -> usize {
        match self {
            ControlSet::Box { lo, .. } => lo.len(),
            ControlSet::Ball { center, .. } => center.len(),
            ControlSet::Polytope { vertices } => vertices.first().map_or(0, Vec::len),
            ControlSet::Product { parts } => parts.iter().map(ControlSet::dim).sum(),
        }
    }

    /// Checks non-emptiness and boundedness.
    pub fn validate(&self) -> Result<()> {
        match self {
            ControlSet::Box { lo, hi } => {
                if lo.len() != hi.len() || lo.is_empty() {
                    return Err(LaxError::Invalid("box bounds have mismatched lengths".into()));
                }
                if lo.iter().zip(hi).any(|(l, h)| !(l.is_finite() && h.is_finite() && l <= h)) {
                    return Err(LaxError::Invalid("box bounds must be finite with lo <= hi".into()));
                }
            }
            ControlSet::Ball { center, radius } => {
                if center.is_empty() || !(radius.is_finite() && *radius >= 0.0) {
                    return Err(LaxError::Invalid("ball needs a centre and a finite radius".into()));
                }
            }
            ControlSet::Polytope { vertices } => {
                let d = vertices.first().map_or(0, Vec::len);
                if d == 0 || vertices.iter().any(|v| v.len() != d || v.iter().any(|x| !x.is_finite())) {
                    return Err(LaxError::Invalid("polytope vertices must be non-empty and finite".into()));
                }
            }
            ControlSet::Product { parts } => {
                if parts.is_empty() {
                    return Err(LaxError::Invalid("empty product set".into()));
                }
                for p in parts {
                    p.validate()?;
                }
            }
        }
        Ok(())
    }

    pub fn contains(&self, a: &[f64], tol: f64) -> bool {
        dist2(&self.project(a), a) <= tol
    }

    pub fn project(&self, a: &[f64]) -> Vec<f64> {
        match self {
            ControlSet::Box { lo, hi } => a.iter().zip(lo.iter().zip(hi)).map(|(x, (l, h))| x.clamp(*l, *h)).collect(),
            ControlSet::Ball { center, radius } => {
                let d: Vec<f64> = a.iter().zip(center).map(|(x, c)| x - c).collect();
                let r = norm2(&d);
                if r <= *radius {
                    a.to_vec()
                } else {
                    center.iter().zip(&d).map(|(c, di)| c + di * radius / r).collect()
                }
            }
            ControlSet::Polytope { vertices } => project_hull(vertices, a).0,
            ControlSet::Product { parts } => {
                let mut out = Vec::with_capacity(a.len());
                let mut off = 0;
                for p in parts {
                    let d = p.dim();
                    out.extend(p.project(&a[off..off + d]));
                    off += d;
                }
                out
            }
        }
    }

    /// The control used to fill undefined stretches of a schedule: the lower
    /// corner of a box, the centre of a ball, the first vertex of a polytope.
    pub fn first_control(&self) -> Vec<f64> {
        match self {
            ControlSet::Box { lo, .. } => lo.clone(),
            ControlSet::Ball { center, .. } => center.clone(),
            ControlSet::Polytope { vertices } => vertices[0].clone(),
            ControlSet::Product { parts } => parts.iter().flat_map(ControlSet::first_control).collect(),
        }
    }

    /// Deterministic sample of the set: a tensor grid with `per_axis` points
    /// per coordinate for boxes, concentric rings for balls (2-D) or the
    /// grid clipped to the ball, vertices plus edge midpoints for polytopes.
    pub fn samples(&self, per_axis: usize) -> Vec<Vec<f64>> {
        let per_axis = per_axis.max(2);
        match self {
            ControlSet::Box { lo, hi } => {
                let axes: Vec<Vec<f64>> = lo
                    .iter()
                    .zip(hi)
                    .map(|(l, h)| (0..per_axis).map(|i| l + (h - l) * i as f64 / (per_axis - 1) as f64).collect())
                    .collect();
                cartesian(&axes)
            }
            ControlSet::Ball { center, radius } => {
                let d = center.len();
                let lo: Vec<f64> = center.iter().map(|c| c - radius).collect();
                let hi: Vec<f64> = center.iter().map(|c| c + radius).collect();
                let mut pts: Vec<Vec<f64>> = ControlSet::Box { lo, hi }
                    .samples(per_axis)
                    .into_iter()
                    .filter(|p| dist2(p, center) <= *radius)
                    .collect();
                if d == 2 {
                    let ring = 4 * per_axis;
                    for i in 0..ring {
                        let th = 2.0 * std::f64::consts::PI * i as f64 / ring as f64;
                        pts.push(vec![center[0] + radius * th.cos(), center[1] + radius * th.sin()]);
                    }
                }
                pts
            }
            ControlSet::Polytope { vertices } => {
                let mut pts = vertices.clone();
                for i in 0..vertices.len() {
                    for j in (i + 1)..vertices.len() {
                        pts.push(vertices[i].iter().zip(&vertices[j]).map(|(a, b)| 0.5 * (a + b)).collect());
                    }
                }
                pts
            }
            ControlSet::Product { parts } => {
                let blocks: Vec<Vec<Vec<f64>>> = parts.iter().map(|p| p.samples(per_axis)).collect();
                let mut out: Vec<Vec<f64>> = vec![Vec::new()];
                for block in &blocks {
                    let mut next = Vec::with_capacity(out.len() * block.len());
                    for prefix in &out {
                        for b in block {
                            let mut v = prefix.clone();
                            v.extend_from_slice(b);
                            next.push(v);
                        }
                    }
                    out = next;
                }
                out
            }
        }
    }
}

fn cartesian(axes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = vec![Vec::new()];
    for axis in axes {
        let mut next = Vec::with_capacity(out.len() * axis.len());
        for prefix in &out {
            for v in axis {
                let mut p = prefix.clone();
                p.push(*v);
                next.push(p);
            }
        }
        out = next;
    }
    out
}

/// `weight · |A x - offset|_2` with the rows of `A` stored sparsely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormTerm {
    pub weight: f64,
    pub rows: Vec<Vec<(usize, f64)>>,
    pub offset: Vec<f64>,
}

impl NormTerm {
    /// `A x - offset`.
    pub fn residual(&self, x: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .zip(&self.offset)
            .map(|(row, b)| row.iter().map(|(j, a)| a * x[*j]).sum::<f64>() - b)
            .collect()
    }

    /// Adds `Aᵀ y` into `out`.
    pub fn add_transpose(&self, y: &[f64], out: &mut [f64]) {
        for (row, yi) in self.rows.iter().zip(y) {
            for (j, a) in row {
                out[*j] += a * yi;
            }
        }
    }
}

/// Evaluators and structural hooks of a control problem.
///
/// The required methods describe `f`, `L`, `g`, `c` and `A`. The optional
/// hooks expose the split `f = M(s)x + f^a(s,a)`, the convexified control
/// image `co f^a(s,A)` and closed forms; when a hook is absent the library
/// falls back to sampled computations or refuses with `Unsupported`.
pub trait Model: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn control_set(&self) -> &ControlSet;
    fn structure(&self) -> Structure;

    fn dynamics(&self, s: f64, x: &[f64], a: &[f64], out: &mut [f64]);
    fn stage_cost(&self, s: f64, x: &[f64], a: &[f64]) -> f64;
    fn terminal_cost(&self, s: f64, x: &[f64]) -> f64;
    /// Value and gradient of `g`. Norm terms are smoothed with parameter
    /// `mu` (`sqrt(|y|^2 + mu^2) - mu`); `mu = 0` yields a subgradient.
    fn terminal_cost_grad(&self, s: f64, x: &[f64], mu: f64, grad: &mut [f64]) -> f64;

    /// Declares `g(s,x) = Σ_j w_j |A_j x - b_j|_2 + g_s(s,x)`, which lets
    /// the solver treat the norms exactly instead of smoothing them.
    fn terminal_norms(&self, _s: f64) -> Option<Vec<NormTerm>> {
        None
    }

    /// The smooth remainder `g_s` and its gradient when
    /// [`Model::terminal_norms`] is declared.
    fn terminal_smooth(&self, _s: f64, _x: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        0.0
    }

    /// Number of scalar constraints; `c = max_j c_j`.
    fn constraint_count(&self) -> usize;
    fn constraints(&self, s: f64, x: &[f64], out: &mut [f64]);
    fn constraint_grad(&self, s: f64, x: &[f64], j: usize, grad: &mut [f64]) -> f64;

    /// `M(s)` when the dynamics are affine in the state.
    fn drift_matrix(&self, _s: f64) -> Option<DMatrix<f64>> {
        None
    }

    /// `co f^a(s, A)` when the dynamics are affine in the state.
    fn control_image(&self, _s: f64) -> Option<ImageSet> {
        None
    }

    /// `f^a(s,a) = f(s,0,a)`.
    fn control_term(&self, s: f64, a: &[f64], out: &mut [f64]) {
        let zero = vec![0.0; self.state_dim()];
        self.dynamics(s, &zero, a, out);
    }

    /// `L^x(s,x)` and its gradient for separable stage costs.
    fn stage_cost_state(&self, _s: f64, _x: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        0.0
    }

    /// `L^a(s,a)` for separable stage costs.
    fn stage_cost_control(&self, s: f64, a: &[f64]) -> f64 {
        let n = self.state_dim();
        let zero = vec![0.0; n];
        let mut g = vec![0.0; n];
        self.stage_cost(s, &zero, a) - self.stage_cost_state(s, &zero, &mut g)
    }

    /// Closed-form lower convex envelope `l(s,u) = min { sum γ_i L^a(a_i) :
    /// sum γ_i f^a(a_i) = u }` with its gradient, for `u` in the image.
    fn envelope(&self, _s: f64, _u: &[f64], _grad: &mut [f64]) -> Option<f64> {
        None
    }

    /// Closed-form `max_a -p·f + qL` and a maximiser.
    fn hbar(&self, _s: f64, _x: &[f64], _p: &[f64], _q: f64) -> Option<(f64, Vec<f64>)> {
        None
    }

    /// Closed-form decomposition of an image point `u` into admissible
    /// controls: weights sum to one, or at most one when `with_zero`.
    fn decompose(&self, _s: f64, _x: &[f64], _u: &[f64], _with_zero: bool) -> Option<Vec<Atom>> {
        None
    }

    /// Jacobians of `f` with respect to `x` (n×n) and `a` (n×m); central
    /// differences unless overridden.
    fn dynamics_jacobian(&self, s: f64, x: &[f64], a: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.state_dim();
        let m = self.control_dim();
        let mut jx = DMatrix::zeros(n, n);
        let mut ja = DMatrix::zeros(n, m);
        let mut fp = vec![0.0; n];
        let mut fm = vec![0.0; n];
        let mut xp = x.to_vec();
        for j in 0..n {
            let h = 1e-6 * (1.0 + x[j].abs());
            xp[j] = x[j] + h;
            self.dynamics(s, &xp, a, &mut fp);
            xp[j] = x[j] - h;
            self.dynamics(s, &xp, a, &mut fm);
            xp[j] = x[j];
            for i in 0..n {
                jx[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        let mut ap = a.to_vec();
        for j in 0..m {
            let h = 1e-6 * (1.0 + a[j].abs());
            ap[j] = a[j] + h;
            self.dynamics(s, x, &ap, &mut fp);
            ap[j] = a[j] - h;
            self.dynamics(s, x, &ap, &mut fm);
            ap[j] = a[j];
            for i in 0..n {
                ja[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        (jx, ja)
    }

    /// Gradients of `L` with respect to `x` and `a`; central differences
    /// unless overridden.
    fn stage_cost_grad(&self, s: f64, x: &[f64], a: &[f64], gx: &mut [f64], ga: &mut [f64]) -> f64 {
        let mut xp = x.to_vec();
        for j in 0..x.len() {
            let h = 1e-6 * (1.0 + x[j].abs());
            xp[j] = x[j] + h;
            let fp = self.stage_cost(s, &xp, a);
            xp[j] = x[j] - h;
            let fm = self.stage_cost(s, &xp, a);
            xp[j] = x[j];
            gx[j] = (fp - fm) / (2.0 * h);
        }
        let mut ap = a.to_vec();
        for j in 0..a.len() {
            let h = 1e-6 * (1.0 + a[j].abs());
            ap[j] = a[j] + h;
            let fp = self.stage_cost(s, x, &ap);
            ap[j] = a[j] - h;
            let fm = self.stage_cost(s, x, &ap);
            ap[j] = a[j];
            ga[j] = (fp - fm) / (2.0 * h);
        }
        self.stage_cost(s, x, a)
    }
}

/// A fully specified problem: model, class, horizon and initial state.
#[derive(Clone)]
pub struct ProblemInstance {
    pub name: String,
    pub class: ProblemClass,
    pub time_invariant: bool,
    pub horizon: f64,
    pub x0: Vec<f64>,
    pub model: Arc<dyn Model>,
    /// Free-form run metadata (seeds, sampling radii) carried into manifests.
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl fmt::Debug for ProblemInstance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemInstance")
            .field("name", &self.name)
            .field("class", &self.class)
            .field("time_invariant", &self.time_invariant)
            .field("horizon", &self.horizon)
            .field("x0", &self.x0)
            .finish()
    }
}

impl ProblemInstance {
    /// Builds an instance and checks the basic assumptions: bounded control
    /// set, finite evaluators at the initial state, and (when declared)
    /// time invariance by spot-checking two times.
    pub fn new(
        name: impl Into<String>,
        class: ProblemClass,
        time_invariant: bool,
        horizon: f64,
        x0: Vec<f64>,
        model: Arc<dyn Model>,
    ) -> Result<Self> {
        let n = model.state_dim();
        if x0.len() != n {
            return Err(LaxError::Dimension(format!("x0 has {} entries, state dim is {n}", x0.len())));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(LaxError::Invalid(format!("horizon must be positive, got {horizon}")));
        }
        let set = model.control_set();
        set.validate()?;
        if set.dim() != model.control_dim() {
            return Err(LaxError::Dimension("control set dimension differs from control_dim".into()));
        }
        let inst = ProblemInstance {
            name: name.into(),
            class,
            time_invariant,
            horizon,
            x0,
            model,
            metadata: BTreeMap::new(),
        };
        let a = inst.model.control_set().first_control();
        for s in [0.0, 0.37 * horizon] {
            let mut f = vec![0.0; n];
            inst.model.dynamics(s, &inst.x0, &a, &mut f);
            let l = inst.model.stage_cost(s, &inst.x0, &a);
            let g = inst.model.terminal_cost(s, &inst.x0);
            let c = inst.constraint_max(s, &inst.x0);
            if f.iter().any(|v| !v.is_finite()) || !l.is_finite() || !g.is_finite() || !c.is_finite() {
                return Err(LaxError::Invalid(format!("non-finite evaluator output at s = {s}")));
            }
        }
        if time_invariant && !inst.spot_check_time_invariance() {
            return Err(LaxError::Invalid("instance declared time-invariant but evaluators depend on s".into()));
        }
        Ok(inst)
    }

    pub fn with_metadata(mut self, key: &str, value: serde_json::Value) -> Self {
        self.metadata.insert(key.to_string(), value);
        self
    }

    pub fn n(&self) -> usize {
        self.model.state_dim()
    }

    pub fn m(&self) -> usize {
        self.model.control_dim()
    }

    /// `c(s,x) = max_j c_j(s,x)`.
    pub fn constraint_max(&self, s: f64, x: &[f64]) -> f64 {
        let nc = self.model.constraint_count();
        if nc == 0 {
            return f64::NEG_INFINITY;
        }
        let mut c = vec![0.0; nc];
        self.model.constraints(s, x, &mut c);
        c.into_iter().fold(f64::NEG_INFINITY, f64::max)
    }

    fn spot_check_time_invariance(&self) -> bool {
        let n = self.n();
        let a = self.model.control_set().first_control();
        let (s1, s2) = (0.0, 0.61 * self.horizon);
        let mut f1 = vec![0.0; n];
        let mut f2 = vec![0.0; n];
        self.model.dynamics(s1, &self.x0, &a, &mut f1);
        self.model.dynamics(s2, &self.x0, &a, &mut f2);
        let same = |u: f64, v: f64| (u - v).abs() <= 1e-12 * (1.0 + u.abs());
        f1.iter().zip(&f2).all(|(u, v)| same(*u, *v))
            && same(self.model.stage_cost(s1, &self.x0, &a), self.model.stage_cost(s2, &self.x0, &a))
            && same(self.model.terminal_cost(s1, &self.x0), self.model.terminal_cost(s2, &self.x0))
            && same(self.constraint_max(s1, &self.x0), self.constraint_max(s2, &self.x0))
    }
}

/// Temporal discretisation `0 = t_0 < … < t_K = T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    nodes: Vec<f64>,
}

impl TimeGrid {
    /// Uniform grid with step `dt`; `T/dt` must be an integer up to 1e-9.
    pub fn uniform(horizon: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(LaxError::InvalidGrid(format!("step must be positive, got {dt}")));
        }
        let k = (horizon / dt).round();
        if k < 1.0 || (k * dt - horizon).abs() > 1e-9 * horizon.max(1.0) {
            return Err(LaxError::InvalidGrid(format!("horizon {horizon} is not a multiple of step {dt}")));
        }
        Self::with_steps(horizon, k as usize)
    }

    pub fn with_steps(horizon: f64, k: usize) -> Result<Self> {
        if k == 0 || !(horizon > 0.0) {
            return Err(LaxError::InvalidGrid("need at least one step and a positive horizon".into()));
        }
        let mut nodes: Vec<f64> = (0..=k).map(|i| horizon * i as f64 / k as f64).collect();
        nodes[k] = horizon;
        Ok(TimeGrid { nodes })
    }

    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 || nodes[0] != 0.0 {
            return Err(LaxError::InvalidGrid("grid must start at 0 and have at least two nodes".into()));
        }
        if nodes.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(LaxError::InvalidGrid("grid nodes must be strictly increasing".into()));
        }
        Ok(TimeGrid { nodes })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Number of steps `K`.
    pub fn steps(&self) -> usize {
        self.nodes.len() - 1
    }

    /// `Δ_k = t_{k+1} - t_k`.
    pub fn dt(&self, k: usize) -> f64 {
        self.nodes[k + 1] - self.nodes[k]
    }

    pub fn horizon(&self) -> f64 {
        self.nodes[self.nodes.len() - 1]
    }

    pub fn max_step(&self) -> f64 {
        self.nodes.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }
}

/// Sampled states, with the control held on `[times[i], times[i+1])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Either empty or one entry per sample interval.
    pub controls: Vec<Vec<f64>>,
}

impl Trajectory {
    /// Linear interpolation between samples, clamped at the ends.
    pub fn state_at(&self, s: f64) -> Vec<f64> {
        let t = &self.times;
        if s <= t[0] {
            return self.states[0].clone();
        }
        let last = t.len() - 1;
        if s >= t[last] {
            return self.states[last].clone();
        }
        let i = t.partition_point(|&v| v <= s) - 1;
        if (t[i] - s).abs() <= 1e-12 {
            return self.states[i].clone();
        }
        let w = (s - t[i]) / (t[i + 1] - t[i]);
        self.states[i]
            .iter()
            .zip(&self.states[i + 1])
            .map(|(a, b)| a + w * (b - a))
            .collect()
    }
}

fn rk4_step(model: &dyn Model, s: f64, h: f64, x: &[f64], a: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    model.dynamics(s, x, a, &mut k1);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * h * k1[i];
    }
    model.dynamics(s + 0.5 * h, &tmp, a, &mut k2);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * h * k2[i];
    }
    model.dynamics(s + 0.5 * h, &tmp, a, &mut k3);
    for i in 0..n {
        tmp[i] = x[i] + h * k3[i];
    }
    model.dynamics(s + h, &tmp, a, &mut k4);
    (0..n)
        .map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// Classical RK4 solution of `ẋ = f(s, x, α(s))` for a piecewise-constant
/// control. Every interval between consecutive control breakpoints and
/// `nodes` is split into `substeps` RK4 steps, and every step end is
/// recorded.
pub fn integrate_dynamics(
    instance: &ProblemInstance,
    control: &PiecewiseControl,
    x0: &[f64],
    substeps: usize,
    nodes: &[f64],
) -> Result<Trajectory> {
    if substeps == 0 {
        return Err(LaxError::Invalid("substeps must be at least 1".into()));
    }
    if x0.len() != instance.n() {
        return Err(LaxError::Dimension("x0 length differs from the state dimension".into()));
    }
    let end = control.end();
    let mut cuts: Vec<f64> = control.breakpoints.clone();
    cuts.extend(nodes.iter().copied().filter(|t| *t >= 0.0 && *t <= end));
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts.dedup_by(|a, b| (*a - *b).abs() <= 1e-12);

    let mut times = vec![cuts[0]];
    let mut states = vec![x0.to_vec()];
    let mut controls = Vec::new();
    let mut x = x0.to_vec();
    for w in cuts.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        // Midpoint lookup: a sliver segment merged into this interval by the
        // dedup above must not dictate the control for the whole interval.
        let a = control.value_at(0.5 * (t0 + t1));
        let h = (t1 - t0) / substeps as f64;
        for j in 0..substeps {
            let s = t0 + j as f64 * h;
            x = rk4_step(instance.model.as_ref(), s, h, &x, &a);
            let t = if j + 1 == substeps { t1 } else { t0 + (j + 1) as f64 * h };
            if x.iter().any(|v| !v.is_finite()) {
                return Err(LaxError::IntegrationFailure { time: t, state: x });
            }
            times.push(t);
            states.push(x.clone());
            controls.push(a.clone());
        }
    }
    Ok(Trajectory { times, states, controls })
}

/// Cost curve `J[k'] = ∫_0^{t_k'} L ds + g(t_k', x(t_k'))` on the grid. The
/// integral is a left-endpoint sum over the sample intervals of `traj`,
/// which reduces to the grid Riemann sum when the samples are the nodes.
pub fn evaluate_running_objective(
    instance: &ProblemInstance,
    traj: &Trajectory,
    control: &PiecewiseControl,
    grid: &TimeGrid,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(grid.nodes().len());
    let mut acc = 0.0;
    let mut i = 0;
    for &tk in grid.nodes() {
        while i + 1 < traj.times.len() && traj.times[i + 1] <= tk + 1e-12 {
            let (t0, t1) = (traj.times[i], traj.times[i + 1]);
            let a = control.value_at(t0);
            acc += instance.model.stage_cost(t0, &traj.states[i], &a) * (t1 - t0);
            i += 1;
        }
        let x = traj.state_at(tk);
        let j = acc + instance.model.terminal_cost(tk, &x);
        if !j.is_finite() {
            return Err(LaxError::Invalid(format!("non-finite cost at t = {tk}")));
        }
        out.push(j);
    }
    Ok(out)
}

/// Objective value of a cost curve together with the attaining index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemValue {
    /// `+∞` when no admissible terminal index exists.
    pub value: f64,
    pub k_star: Option<usize>,
    pub infeasible: bool,
}

/// MinMax: largest entry, feasibility required on the whole horizon.
/// MinMin: smallest entry among indices whose prefix is feasible. Ties go to
/// the smallest index. `feasible_upto` is the last index `k'` such that the
/// trajectory is feasible on `[0, t_k']`, or `None`.
pub fn evaluate_problem_value(class: ProblemClass, j: &[f64], feasible_upto: Option<usize>) -> ProblemValue {
    let last = j.len().saturating_sub(1);
    let infeasible = ProblemValue { value: f64::INFINITY, k_star: None, infeasible: true };
    match class {
        ProblemClass::MinMax => {
            if feasible_upto != Some(last) {
                return infeasible;
            }
            let mut best = 0;
            for (k, v) in j.iter().enumerate() {
                if *v > j[best] {
                    best = k;
                }
            }
            ProblemValue { value: j[best], k_star: Some(best), infeasible: false }
        }
        ProblemClass::MinMin => {
            let Some(upto) = feasible_upto else {
                return infeasible;
            };
            let mut best = 0;
            for (k, v) in j.iter().enumerate().take(upto + 1) {
                if *v < j[best] {
                    best = k;
                }
            }
            ProblemValue { value: j[best], k_star: Some(best), infeasible: false }
        }
    }
}

/// Sample-based constraint report on a dense trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    /// `max_s c(s, x(s))` over the samples.
    pub max_violation: f64,
    pub worst_time: f64,
    /// First time `c` exceeds `tol`, linearly interpolated between samples.
    pub first_violation_time: Option<f64>,
    /// Last grid index `k'` with `c <= tol` on `[0, t_k']`.
    pub feasible_upto: Option<usize>,
}

pub fn check_feasibility(instance: &ProblemInstance, traj: &Trajectory, tol: f64, grid: &TimeGrid) -> FeasibilityReport {
    let mut max_violation = f64::NEG_INFINITY;
    let mut worst_time = 0.0;
    let mut first: Option<f64> = None;
    let mut prev: Option<(f64, f64)> = None;
    for (t, x) in traj.times.iter().zip(&traj.states) {
        let c = instance.constraint_max(*t, x);
        if c > max_violation {
            max_violation = c;
            worst_time = *t;
        }
        if first.is_none() && c > tol {
            first = Some(match prev {
                Some((tp, cp)) if cp <= tol => tp + (t - tp) * (tol - cp) / (c - cp),
                _ => *t,
            });
        }
        prev = Some((*t, c));
    }
    let feasible_upto = match first {
        None => Some(grid.steps()),
        Some(tv) => {
            let count = grid.nodes().iter().filter(|&&tk| tk < tv - 1e-12).count();
            count.checked_sub(1)
        }
    };
    FeasibilityReport { max_violation, worst_time, first_violation_time: first, feasible_upto }
}

/// Convenience: the affine term `M x` for a drift matrix.
pub(crate) fn mat_vec(m: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)] * x[j]).sum()).collect()
}

/// `Mᵀ y`.
pub(crate) fn mat_t_vec(m: &DMatrix<f64>, y: &[f64]) -> Vec<f64> {
    (0..m.ncols()).map(|j| (0..m.nrows()).map(|i| m[(i, j)] * y[i]).sum()).collect()
}

/// Weighted sum of atoms' dynamics and stage costs, `sum γ_i (L, f)(s,x,a_i)`.
pub fn atom_moments(instance: &ProblemInstance, s: f64, x: &[f64], atoms: &[Atom]) -> (f64, Vec<f64>) {
    let n = instance.n();
    let mut fsum = vec![0.0; n];
    let mut lsum = 0.0;
    let mut f = vec![0.0; n];
    for at in atoms {
        instance.model.dynamics(s, x, &at.control, &mut f);
        for i in 0..n {
            fsum[i] += at.weight * f[i];
        }
        lsum += at.weight * instance.model.stage_cost(s, x, &at.control);
    }
    (lsum, fsum)
}

#[allow(dead_code)]
pub(crate) fn inner(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenarios::{toy_1d, Toy1d, ToyConstraint, ToyTerminal};

    fn toy(x0: f64) -> ProblemInstance {
        toy_1d(Toy1d { x0, ..Toy1d::default() }, ProblemClass::MinMax).unwrap()
    }

    #[test]
    fn constant_rate_integration() {
        let inst = toy(0.0);
        let ctl = PiecewiseControl::constant(1.0, vec![1.0]);
        let tr = integrate_dynamics(&inst, &ctl, &[0.0], 4, &[]).unwrap();
        assert!((tr.states.last().unwrap()[0] - 1.0).abs() < 1e-14);
        assert_eq!(tr.times.len(), 5);
    }

    #[test]
    fn zero_field_keeps_state() {
        let inst = toy(0.5);
        let ctl = PiecewiseControl::constant(1.0, vec![0.0]);
        let tr = integrate_dynamics(&inst, &ctl, &[0.5], 3, &[0.25, 0.5]).unwrap();
        assert!(tr.states.iter().all(|x| (x[0] - 0.5).abs() < 1e-15));
        assert!(tr.times.iter().any(|t| (*t - 0.25).abs() < 1e-15));
    }

    #[test]
    fn zero_substeps_rejected() {
        let inst = toy(0.0);
        let ctl = PiecewiseControl::constant(1.0, vec![0.0]);
        assert!(integrate_dynamics(&inst, &ctl, &[0.0], 0, &[]).is_err());
    }

    #[test]
    fn cost_curve_zero_stage_cost() {
        let inst = toy(0.5);
        let grid = TimeGrid::uniform(1.0, 0.5).unwrap();
        let ctl = PiecewiseControl::constant(1.0, vec![-1.0]);
        let tr = integrate_dynamics(&inst, &ctl, &[0.5], 10, grid.nodes()).unwrap();
        let j = evaluate_running_objective(&inst, &tr, &ctl, &grid).unwrap();
        for (a, b) in j.iter().zip([0.5, 0.0, 0.5]) {
            assert!((a - b).abs() < 1e-12, "{j:?}");
        }
    }

    #[test]
    fn cost_curve_constant_integrand() {
        let inst = toy_1d(
            Toy1d { stage_offset: 1.0, terminal: ToyTerminal::Zero, ..Toy1d::default() },
            ProblemClass::MinMax,
        )
        .unwrap();
        let grid = TimeGrid::uniform(1.0, 0.1).unwrap();
        let ctl = PiecewiseControl::constant(1.0, vec![0.0]);
        let tr = integrate_dynamics(&inst, &ctl, &[0.0], 1, grid.nodes()).unwrap();
        let j = evaluate_running_objective(&inst, &tr, &ctl, &grid).unwrap();
        for (k, v) in j.iter().enumerate() {
            assert!((v - 0.1 * k as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn problem_value_examples() {
        let j = [0.5, 0.0, 0.5];
        let v = evaluate_problem_value(ProblemClass::MinMax, &j, Some(2));
        assert_eq!((v.value, v.k_star), (0.5, Some(0)));
        let v = evaluate_problem_value(ProblemClass::MinMin, &j, Some(2));
        assert_eq!((v.value, v.k_star), (0.0, Some(1)));
        let v = evaluate_problem_value(ProblemClass::MinMin, &[0.3, 0.1, 0.2], Some(1));
        assert_eq!((v.value, v.k_star), (0.1, Some(1)));
        let v = evaluate_problem_value(ProblemClass::MinMax, &j, Some(1));
        assert!(v.infeasible && v.value.is_infinite());
        let v = evaluate_problem_value(ProblemClass::MinMin, &j, None);
        assert!(v.infeasible);
    }

    #[test]
    fn feasibility_of_resting_state() {
        let inst = toy(0.0);
        let grid = TimeGrid::uniform(1.0, 0.25).unwrap();
        let ctl = PiecewiseControl::constant(1.0, vec![0.0]);
        let tr = integrate_dynamics(&inst, &ctl, &[0.0], 2, grid.nodes()).unwrap();
        let rep = check_feasibility(&inst, &tr, 1e-6, &grid);
        assert!((rep.max_violation + 2.0).abs() < 1e-15);
        assert_eq!(rep.feasible_upto, Some(4));
        assert!(rep.first_violation_time.is_none());
    }

    #[test]
    fn feasibility_sign_crossing() {
        let inst = toy_1d(
            Toy1d { x0: 0.5, constraint: ToyConstraint::Lower(0.0), ..Toy1d::default() },
            ProblemClass::MinMin,
        )
        .unwrap();
        let grid = TimeGrid::uniform(1.0, 0.25).unwrap();
        let ctl = PiecewiseControl::constant(1.0, vec![-1.0]);
        let tr = integrate_dynamics(&inst, &ctl, &[0.5], 10, grid.nodes()).unwrap();
        let rep = check_feasibility(&inst, &tr, 1e-6, &grid);
        assert!((rep.first_violation_time.unwrap() - 0.5).abs() < 1e-5);
        assert_eq!(rep.feasible_upto, Some(2));
    }

    #[test]
    fn grid_rejects_non_multiple() {
        assert!(TimeGrid::uniform(1.0, 0.3).is_err());
        let g = TimeGrid::uniform(2.0, 0.1).unwrap();
        assert_eq!(g.steps(), 20);
        assert_eq!(g.horizon(), 2.0);
        assert!(TimeGrid::from_nodes(vec![0.0, 0.5, 0.5]).is_err());
    }

    #[test]
    fn box_projection_and_samples() {
        let b = ControlSet::Box { lo: vec![-1.0, 0.0], hi: vec![1.0, 2.0] };
        assert_eq!(b.project(&[3.0, -1.0]), vec![1.0, 0.0]);
        assert_eq!(b.samples(3).len(), 9);
        assert!(b.contains(&[0.0, 1.0], 0.0));
        let ball = ControlSet::Ball { center: vec![0.0, 0.0], radius: 1.0 };
        let p = ball.project(&[3.0, 4.0]);
        assert!((p[0] - 0.6).abs() < 1e-15 && (p[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn time_invariance_is_spot_checked() {
        let err = crate::scenarios::example_a(1, 3).map(|mut i| {
            i.time_invariant = true;
            i.spot_check_time_invariance()
        });
        assert_eq!(err.unwrap(), false);
    }
}
