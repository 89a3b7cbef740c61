//! Hamiltonians, their conjugates and the relaxed control images.
//!
//! For a model with `f = M(s)x + f^a(s,a)` the negated velocity set is
//! `B(s,x) = -M(s)x - U(s)` with `U(s) = co f^a(s,A)`, described by an
//! [`ImageSet`]. Models without that split fall back to a sampled polytope.

use minilp::{ComparisonOp, OptimizationDirection, Problem};
use serde::{Deserialize, Serialize};

use crate::error::{LaxError, Result};
use crate::numerics::{dist2, dot, golden_min, norm2, project_hull};
use crate::problem_model::{mat_vec, ProblemInstance};

/// Points per axis used when a closed form is missing and a control set has
/// to be sampled.
pub const SAMPLE_PER_AXIS: usize = 41;

/// Tolerance for domain membership.
pub const DOMAIN_TOL: f64 = 1e-9;

const GOLDEN_ITERS: usize = 200;

/// A compact convex set in velocity space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ImageSet {
    Box {
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
    /// Points `y` with `y_i = offset_i` off `axes`, and `y[axes]` in the
    /// ball of `radius` around `offset[axes]`, optionally cut by the slab
    /// `|y[axes[j]] - offset[axes[j]]| <= h` for `slab = Some((j, h))`.
    BallSlab {
        offset: Vec<f64>,
        axes: Vec<usize>,
        radius: f64,
        slab: Option<(usize, f64)>,
    },
    Polytope {
        vertices: Vec<Vec<f64>>,
    },
    Product {
        parts: Vec<ImageSet>,
    },
}

impl ImageSet {
    pub fn dim(&self) -> usize {
        match self {
            ImageSet::Box { lo, .. } => lo.len(),
            ImageSet::BallSlab { offset, .. } => offset.len(),
            ImageSet::Polytope { vertices } => vertices.first().map_or(0, Vec::len),
            ImageSet::Product { parts } => parts.iter().map(ImageSet::dim).sum(),
        }
    }

    fn split<'a>(&self, y: &'a [f64]) -> Vec<&'a [f64]> {
        let ImageSet::Product { parts } = self else {
            return vec![y];
        };
        let mut out = Vec::with_capacity(parts.len());
        let mut off = 0;
        for p in parts {
            let d = p.dim();
            out.push(&y[off..off + d]);
            off += d;
        }
        out
    }

    /// Euclidean projection.
    pub fn project(&self, y: &[f64]) -> Vec<f64> {
        match self {
            ImageSet::Box { lo, hi } => y.iter().zip(lo.iter().zip(hi)).map(|(v, (l, h))| v.clamp(*l, *h)).collect(),
            ImageSet::BallSlab { offset, axes, radius, slab } => {
                let mut out = offset.clone();
                let mut d: Vec<f64> = axes.iter().map(|&i| y[i] - offset[i]).collect();
                let nd = norm2(&d);
                let mut ball: Vec<f64> = if nd > *radius { d.iter().map(|v| v * radius / nd).collect() } else { d.clone() };
                if let Some((j, h)) = *slab {
                    if ball[j].abs() > h {
                        d[j] = h * d[j].signum();
                        let rest_r = (radius * radius - h * h).max(0.0).sqrt();
                        let rest: f64 = d.iter().enumerate().filter(|(i, _)| *i != j).map(|(_, v)| v * v).sum::<f64>().sqrt();
                        if rest > rest_r {
                            for (i, v) in d.iter_mut().enumerate() {
                                if i != j {
                                    *v *= rest_r / rest;
                                }
                            }
                        }
                        ball = d;
                    }
                }
                for (k, &i) in axes.iter().enumerate() {
                    out[i] += ball[k];
                }
                out
            }
            ImageSet::Polytope { vertices } => project_hull(vertices, y).0,
            ImageSet::Product { parts } => {
                parts.iter().zip(self.split(y)).flat_map(|(p, yi)| p.project(yi)).collect()
            }
        }
    }

    /// Signed margin, `<= 0` inside. Box and ball margins are negative in
    /// the interior; the polytope margin is the distance to the hull.
    pub fn margin(&self, y: &[f64]) -> f64 {
        match self {
            ImageSet::Box { lo, hi } => y
                .iter()
                .zip(lo.iter().zip(hi))
                .map(|(v, (l, h))| (l - v).max(v - h))
                .fold(f64::NEG_INFINITY, f64::max),
            ImageSet::BallSlab { offset, axes, radius, slab } => {
                let d: Vec<f64> = axes.iter().map(|&i| y[i] - offset[i]).collect();
                let mut m = norm2(&d) - radius;
                if let Some((j, h)) = *slab {
                    m = m.max(d[j].abs() - h);
                }
                let fixed = (0..offset.len())
                    .filter(|i| !axes.contains(i))
                    .map(|i| (y[i] - offset[i]).abs())
                    .fold(0.0, f64::max);
                if fixed > 1e-12 {
                    m.max(fixed)
                } else {
                    m
                }
            }
            ImageSet::Polytope { vertices } => dist2(&project_hull(vertices, y).0, y),
            ImageSet::Product { parts } => parts
                .iter()
                .zip(self.split(y))
                .map(|(p, yi)| p.margin(yi))
                .fold(f64::NEG_INFINITY, f64::max),
        }
    }

    /// Support function `max_{u in U} q·u`.
    pub fn support(&self, q: &[f64]) -> f64 {
        match self {
            ImageSet::Box { lo, hi } => q.iter().zip(lo.iter().zip(hi)).map(|(v, (l, h))| (v * l).max(v * h)).sum(),
            ImageSet::BallSlab { offset, axes, radius, slab } => {
                let qa: Vec<f64> = axes.iter().map(|&i| q[i]).collect();
                let nq = norm2(&qa);
                let base = dot(q, offset);
                let ball = radius * nq;
                match *slab {
                    Some((j, h)) if nq > 0.0 && (radius * qa[j] / nq).abs() > h => {
                        let rest: f64 = qa.iter().enumerate().filter(|(i, _)| *i != j).map(|(_, v)| v * v).sum::<f64>().sqrt();
                        base + qa[j].abs() * h + (radius * radius - h * h).max(0.0).sqrt() * rest
                    }
                    _ => base + ball,
                }
            }
            ImageSet::Polytope { vertices } => vertices.iter().map(|v| dot(v, q)).fold(f64::NEG_INFINITY, f64::max),
            ImageSet::Product { parts } => parts.iter().zip(self.split(q)).map(|(p, qi)| p.support(qi)).sum(),
        }
    }

    /// The set shifted by `t`.
    pub fn translated(&self, t: &[f64]) -> ImageSet {
        match self {
            ImageSet::Box { lo, hi } => ImageSet::Box {
                lo: lo.iter().zip(t).map(|(a, b)| a + b).collect(),
                hi: hi.iter().zip(t).map(|(a, b)| a + b).collect(),
            },
            ImageSet::BallSlab { offset, axes, radius, slab } => ImageSet::BallSlab {
                offset: offset.iter().zip(t).map(|(a, b)| a + b).collect(),
                axes: axes.clone(),
                radius: *radius,
                slab: *slab,
            },
            ImageSet::Polytope { vertices } => ImageSet::Polytope {
                vertices: vertices.iter().map(|v| v.iter().zip(t).map(|(a, b)| a + b).collect()).collect(),
            },
            ImageSet::Product { parts } => ImageSet::Product {
                parts: parts.iter().zip(self.split(t)).map(|(p, ti)| p.translated(ti)).collect(),
            },
        }
    }

    /// A finite set of boundary points containing every extreme point for
    /// boxes and polytopes and an angular sample of curved boundaries.
    pub fn extreme_points(&self, per_curve: usize) -> Vec<Vec<f64>> {
        match self {
            ImageSet::Box { lo, hi } => {
                let d = lo.len();
                (0..(1usize << d))
                    .map(|mask| (0..d).map(|i| if mask >> i & 1 == 1 { hi[i] } else { lo[i] }).collect())
                    .collect()
            }
            ImageSet::BallSlab { offset, axes, radius, .. } => {
                let k = per_curve.max(8);
                let mut out = Vec::new();
                if axes.len() == 2 {
                    for i in 0..k {
                        let th = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
                        let mut y = offset.clone();
                        y[axes[0]] += radius * th.cos();
                        y[axes[1]] += radius * th.sin();
                        out.push(self.project(&y));
                    }
                } else {
                    for &i in axes {
                        for sgn in [-1.0, 1.0] {
                            let mut y = offset.clone();
                            y[i] += sgn * radius;
                            out.push(self.project(&y));
                        }
                    }
                }
                out
            }
            ImageSet::Polytope { vertices } => vertices.clone(),
            ImageSet::Product { parts } => {
                let mut out: Vec<Vec<f64>> = vec![Vec::new()];
                for p in parts {
                    let pts = p.extreme_points(per_curve);
                    let mut next = Vec::with_capacity(out.len() * pts.len());
                    for prefix in &out {
                        for q in &pts {
                            let mut v = prefix.clone();
                            v.extend_from_slice(q);
                            next.push(v);
                        }
                    }
                    out = next;
                }
                out
            }
        }
    }

    fn scaled_project(&self, lam: f64, y: &[f64]) -> Vec<f64> {
        if lam <= 0.0 {
            return vec![0.0; y.len()];
        }
        let inner: Vec<f64> = y.iter().map(|v| v / lam).collect();
        self.project(&inner).into_iter().map(|v| v * lam).collect()
    }

    /// Projection onto `{λu : λ in [0,1], u in U}` together with the scale.
    pub fn zero_hull_project(&self, y: &[f64]) -> (Vec<f64>, f64) {
        let (lam, _) = golden_min(|l| dist2(&self.scaled_project(l, y), y), 0.0, 1.0, GOLDEN_ITERS);
        (self.scaled_project(lam, y), lam)
    }

    /// Signed margin for `{λu : λ in [0,1], u in U}`: the minimum over λ of
    /// the perspective `λ·margin(y/λ)`.
    pub fn zero_hull_margin(&self, y: &[f64]) -> f64 {
        let persp = |l: f64| {
            let l = l.max(1e-12);
            let inner: Vec<f64> = y.iter().map(|v| v / l).collect();
            l * self.margin(&inner)
        };
        golden_min(persp, 0.0, 1.0, GOLDEN_ITERS).1
    }

    /// Range of scales `λ in [0,1]` with `y in λU`, if any.
    pub fn zero_hull_scales(&self, y: &[f64]) -> Option<(f64, f64)> {
        let (p, lam) = self.zero_hull_project(y);
        if dist2(&p, y) > 1e-9 {
            return None;
        }
        let inside = |l: f64| {
            if l <= 0.0 {
                return norm2(y) <= 1e-12;
            }
            let inner: Vec<f64> = y.iter().map(|v| v / l).collect();
            self.margin(&inner) * l <= 1e-10
        };
        let bisect = |mut good: f64, mut bad: f64| {
            for _ in 0..100 {
                let mid = 0.5 * (good + bad);
                if inside(mid) {
                    good = mid;
                } else {
                    bad = mid;
                }
            }
            good
        };
        let lo = if inside(0.0) { 0.0 } else { bisect(lam, 0.0) };
        let hi = if inside(1.0) { 1.0 } else { bisect(lam, 1.0) };
        Some((lo, hi))
    }
}

/// `B(s,x)` or `co({0} ∪ B(s,x))` for one state and time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlImageSet {
    /// `M(s)x + U(s)`, the set of admissible velocities (convexified).
    pub velocities: ImageSet,
    pub include_zero: bool,
    /// True when `velocities` was sampled rather than declared.
    pub sampled: bool,
}

impl ControlImageSet {
    /// Builds the set from the model's affine split, or from a sampled
    /// polytope of velocities when the split is not declared.
    pub fn new(instance: &ProblemInstance, s: f64, x: &[f64], include_zero: bool) -> Result<Self> {
        let model = &instance.model;
        if let (Some(mm), Some(u)) = (model.drift_matrix(s), model.control_image(s)) {
            let shift = mat_vec(&mm, x);
            return Ok(ControlImageSet { velocities: u.translated(&shift), include_zero, sampled: false });
        }
        let n = instance.n();
        let mut f = vec![0.0; n];
        let vertices: Vec<Vec<f64>> = model
            .control_set()
            .samples(SAMPLE_PER_AXIS)
            .iter()
            .map(|a| {
                model.dynamics(s, x, a, &mut f);
                f.clone()
            })
            .collect();
        if vertices.is_empty() {
            return Err(LaxError::Construction("control set produced no samples".into()));
        }
        Ok(ControlImageSet { velocities: ImageSet::Polytope { vertices }, include_zero, sampled: true })
    }

    /// Membership of `b` together with the signed margin (negative inside,
    /// boundary counts as inside).
    pub fn contains(&self, b: &[f64]) -> (bool, f64) {
        let v: Vec<f64> = b.iter().map(|x| -x).collect();
        let m = if self.include_zero { self.velocities.zero_hull_margin(&v) } else { self.velocities.margin(&v) };
        (m <= DOMAIN_TOL, m)
    }
}

/// Lemma-5 style domain test: is `b` in `co(B)` (or `co({0}∪B)`).
pub fn domain_contains(imgset: &ControlImageSet, b: &[f64]) -> (bool, f64) {
    imgset.contains(b)
}

/// `H̄(s,x,z,p,q) = max_a -p·f + qL` and a maximiser. `z` does not enter.
pub fn eval_hbar(instance: &ProblemInstance, s: f64, x: &[f64], _z: f64, p: &[f64], q: f64) -> Result<(f64, Vec<f64>)> {
    let model = &instance.model;
    if let Some(r) = model.hbar(s, x, p, q) {
        return Ok(r);
    }
    sampled_hbar(instance, s, x, p, q)
}

/// `H̄` by exhaustive evaluation over [`SAMPLE_PER_AXIS`] points per axis.
pub fn sampled_hbar(instance: &ProblemInstance, s: f64, x: &[f64], p: &[f64], q: f64) -> Result<(f64, Vec<f64>)> {
    let model = &instance.model;
    let mut f = vec![0.0; instance.n()];
    let mut best = (f64::NEG_INFINITY, Vec::new());
    for a in model.control_set().samples(SAMPLE_PER_AXIS) {
        model.dynamics(s, x, &a, &mut f);
        let v = -dot(p, &f) + q * model.stage_cost(s, x, &a);
        if !v.is_finite() {
            return Err(LaxError::Invalid(format!("non-finite Hamiltonian term at s = {s}")));
        }
        if v > best.0 {
            best = (v, a);
        }
    }
    Ok(best)
}

/// `H(s,x,p) = H̄(s,x,·,p,-1)`.
pub fn eval_h(instance: &ProblemInstance, s: f64, x: &[f64], p: &[f64]) -> Result<f64> {
    Ok(eval_hbar(instance, s, x, 0.0, p, -1.0)?.0)
}

/// Lower convex envelope of `(point_i, cost_i)` at `target` by linear
/// programming. `sum_one = false` allows total weight below one (the
/// missing weight sits at the origin with zero cost). Returns the value
/// and the weights, or `None` when `target` is not representable.
pub(crate) fn lp_envelope(points: &[Vec<f64>], costs: &[f64], target: &[f64], sum_one: bool, tol: f64) -> Option<(f64, Vec<f64>)> {
    let mut problem = Problem::new(OptimizationDirection::Minimize);
    let vars: Vec<_> = costs.iter().map(|c| problem.add_var(*c, (0.0, 1.0))).collect();
    for (i, t) in target.iter().enumerate() {
        let row: Vec<_> = vars.iter().zip(points).map(|(v, p)| (*v, p[i])).collect();
        problem.add_constraint(row.as_slice(), ComparisonOp::Ge, t - tol);
        problem.add_constraint(row.as_slice(), ComparisonOp::Le, t + tol);
    }
    let ones: Vec<_> = vars.iter().map(|v| (*v, 1.0)).collect();
    problem.add_constraint(ones.as_slice(), if sum_one { ComparisonOp::Eq } else { ComparisonOp::Le }, 1.0);
    let sol = problem.solve().ok()?;
    let w: Vec<f64> = vars.iter().map(|v| sol[*v].max(0.0)).collect();
    Some((sol.objective(), w))
}

/// `ℓ(s,u)`, the lower convex envelope of `L^a` over preimages of `u`:
/// closed form when declared, else an LP over sampled controls.
pub(crate) fn envelope_value(instance: &ProblemInstance, s: f64, u: &[f64]) -> Option<f64> {
    let model = &instance.model;
    if model.structure().stage.zero {
        return Some(0.0);
    }
    let mut g = vec![0.0; u.len()];
    if let Some(v) = model.envelope(s, u, &mut g) {
        return Some(v);
    }
    let n = instance.n();
    let mut f = vec![0.0; n];
    let samples = model.control_set().samples(SAMPLE_PER_AXIS);
    let pts: Vec<Vec<f64>> = samples
        .iter()
        .map(|a| {
            model.control_term(s, a, &mut f);
            f.clone()
        })
        .collect();
    let costs: Vec<f64> = samples.iter().map(|a| model.stage_cost_control(s, a)).collect();
    lp_envelope(&pts, &costs, u, true, 1e-9).map(|r| r.0)
}

/// `H*(s,x,b)`, `+∞` outside `co(B(s,x))`.
///
/// Zero stage cost gives 0 on the domain. Separable costs give
/// `L^x(s,x) + ℓ(s, -b - M(s)x)`. Anything else is the biconjugate over a
/// sampled control set (reduced accuracy).
pub fn eval_h_star(instance: &ProblemInstance, s: f64, x: &[f64], b: &[f64]) -> Result<f64> {
    let img = ControlImageSet::new(instance, s, x, false)?;
    if !img.contains(b).0 {
        return Ok(f64::INFINITY);
    }
    let model = &instance.model;
    let st = model.structure();
    if st.stage.zero {
        return Ok(0.0);
    }
    if st.stage.separable {
        if let Some(mm) = model.drift_matrix(s) {
            let mx = mat_vec(&mm, x);
            let u: Vec<f64> = b.iter().zip(&mx).map(|(bi, mi)| -bi - mi).collect();
            let mut g = vec![0.0; x.len()];
            let lx = model.stage_cost_state(s, x, &mut g);
            return Ok(envelope_value(instance, s, &u).map_or(f64::INFINITY, |l| lx + l));
        }
    }
    let n = instance.n();
    let mut f = vec![0.0; n];
    let samples = model.control_set().samples(SAMPLE_PER_AXIS);
    let pts: Vec<Vec<f64>> = samples
        .iter()
        .map(|a| {
            model.dynamics(s, x, a, &mut f);
            f.iter().map(|v| -v).collect()
        })
        .collect();
    let costs: Vec<f64> = samples.iter().map(|a| model.stage_cost(s, x, a)).collect();
    Ok(lp_envelope(&pts, &costs, b, true, 1e-9).map_or(f64::INFINITY, |r| r.0))
}

fn require_time_invariant(instance: &ProblemInstance) -> Result<()> {
    if instance.time_invariant {
        Ok(())
    } else {
        Err(LaxError::Unsupported("time-invariant Hamiltonian requested for a time-varying instance".into()))
    }
}

/// `H_2^TI(x,p) = max{0, H(x,p)}`.
pub fn eval_h2ti(instance: &ProblemInstance, x: &[f64], p: &[f64]) -> Result<f64> {
    require_time_invariant(instance)?;
    Ok(eval_h(instance, 0.0, x, p)?.max(0.0))
}

/// Conjugate of `H_2^TI`: the perspective `min_{λ in (0,1]} λ H*(x, b/λ)`,
/// with `min{0, H*(x,0)}` at `b = 0`; `+∞` outside `co({0} ∪ B(x))`.
pub fn eval_h2ti_star(instance: &ProblemInstance, x: &[f64], b: &[f64]) -> Result<f64> {
    require_time_invariant(instance)?;
    let img = ControlImageSet::new(instance, 0.0, x, true)?;
    if !img.contains(b).0 {
        return Ok(f64::INFINITY);
    }
    if instance.model.structure().stage.zero {
        return Ok(0.0);
    }
    if norm2(b) <= 1e-14 {
        return Ok(eval_h_star(instance, 0.0, x, b)?.min(0.0));
    }
    let v: Vec<f64> = b.iter().map(|x| -x).collect();
    let Some((lo, hi)) = img.velocities.zero_hull_scales(&v) else {
        return Ok(f64::INFINITY);
    };
    let lo = lo.max(1e-12);
    let mut err = None;
    let persp = |l: f64| {
        let scaled: Vec<f64> = b.iter().map(|x| x / l).collect();
        match eval_h_star(instance, 0.0, x, &scaled) {
            Ok(h) if h.is_finite() => l * h,
            Ok(_) => f64::INFINITY,
            Err(e) => {
                err = Some(e);
                f64::INFINITY
            }
        }
    };
    let (_, val) = golden_min(persp, lo, hi, GOLDEN_ITERS);
    if let Some(e) = err {
        return Err(e);
    }
    Ok(val)
}

/// `max_{u in U} -p·u + qℓ(u)` for the image set `U`.
fn image_max(instance: &ProblemInstance, s: f64, u_set: &ImageSet, p: &[f64], q: f64) -> Result<f64> {
    let neg_p: Vec<f64> = p.iter().map(|v| -v).collect();
    let zero_cost = instance.model.structure().stage.zero;
    if zero_cost || q == 0.0 {
        return Ok(u_set.support(&neg_p));
    }
    let ell = |u: &[f64]| envelope_value(instance, s, u).unwrap_or(f64::INFINITY);
    if q > 0.0 {
        // Convex objective: the maximum sits at an extreme point.
        return Ok(u_set
            .extreme_points(720)
            .iter()
            .map(|u| -dot(p, u) + q * ell(u))
            .fold(f64::NEG_INFINITY, f64::max));
    }
    if u_set.dim() == 1 || is_effectively_1d(u_set) {
        let (lo, hi, axis) = interval_of(u_set);
        let point = |t: f64| {
            let mut u = u_set.project(&vec![0.0; u_set.dim()]);
            u[axis] = t;
            u
        };
        let (_, v) = golden_min(|t| -(-dot(p, &point(t)) + q * ell(&point(t))), lo, hi, GOLDEN_ITERS);
        return Ok(-v);
    }
    // Concave maximisation by projected gradient ascent with a declared
    // envelope gradient.
    let mut grad_l = vec![0.0; u_set.dim()];
    let mut u = u_set.project(&vec![0.0; u_set.dim()]);
    let value = |u: &[f64], g: &mut [f64]| -> Option<f64> { instance.model.envelope(s, u, g).map(|l| -dot(p, u) + q * l) };
    let Some(mut fu) = value(&u, &mut grad_l) else {
        return Err(LaxError::Unsupported("multi-dimensional envelope maximisation needs a declared envelope".into()));
    };
    let mut step = 1.0;
    for _ in 0..5000 {
        let dir: Vec<f64> = (0..u.len()).map(|i| -p[i] + q * grad_l[i]).collect();
        let mut accepted = false;
        while step > 1e-14 {
            let trial: Vec<f64> = u.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            let trial = u_set.project(&trial);
            let mut g2 = vec![0.0; u.len()];
            let ft = value(&trial, &mut g2).unwrap_or(f64::NEG_INFINITY);
            if ft >= fu - 1e-15 {
                let moved = dist2(&trial, &u);
                u = trial;
                fu = ft;
                grad_l = g2;
                step *= 2.0;
                accepted = moved > 1e-13;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(fu)
}

fn is_effectively_1d(u_set: &ImageSet) -> bool {
    matches!(u_set, ImageSet::Box { lo, hi } if lo.iter().zip(hi).filter(|(l, h)| h > l).count() <= 1)
}

fn interval_of(u_set: &ImageSet) -> (f64, f64, usize) {
    match u_set {
        ImageSet::Box { lo, hi } => {
            let axis = (0..lo.len()).find(|&i| hi[i] > lo[i]).unwrap_or(0);
            (lo[axis], hi[axis], axis)
        }
        ImageSet::Polytope { vertices } => {
            let vals: Vec<f64> = vertices.iter().map(|v| v[0]).collect();
            (vals.iter().cloned().fold(f64::INFINITY, f64::min), vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max), 0)
        }
        _ => (0.0, 0.0, 0),
    }
}

fn affine_parts(instance: &ProblemInstance, s: f64, x: &[f64]) -> Result<(Vec<f64>, ImageSet)> {
    let model = &instance.model;
    match (model.drift_matrix(s), model.control_image(s)) {
        (Some(mm), Some(u)) => Ok((mat_vec(&mm, x), u)),
        _ => Err(LaxError::Unsupported("the conjugate-side Hamiltonian needs f = M(s)x + f^a(s,a)".into())),
    }
}

/// `H̄_W(s,x,z,p,q) = max_{b in co(B)} p·b + qH*(s,x,b)`, computed over the
/// declared image set: `-p·Mx + qL^x + max_u (-p·u + qℓ(u))`.
pub fn eval_hbar_w(instance: &ProblemInstance, s: f64, x: &[f64], _z: f64, p: &[f64], q: f64) -> Result<f64> {
    let (mx, u_set) = affine_parts(instance, s, x)?;
    let mut g = vec![0.0; x.len()];
    let lx = if instance.model.structure().stage.zero { 0.0 } else { instance.model.stage_cost_state(s, x, &mut g) };
    Ok(-dot(p, &mx) + q * lx + image_max(instance, s, &u_set, p, q)?)
}

/// `H̄_W^TI(x,z,p,q) = max_{b in co({0}∪B)} p·b + qH_2^TI*(x,b)`.
pub fn eval_hbar_w_ti(instance: &ProblemInstance, x: &[f64], _z: f64, p: &[f64], q: f64) -> Result<f64> {
    require_time_invariant(instance)?;
    let (mx, u_set) = affine_parts(instance, 0.0, x)?;
    let vel = u_set.translated(&mx);
    let zero_cost = instance.model.structure().stage.zero;
    let neg_p: Vec<f64> = p.iter().map(|v| -v).collect();
    if zero_cost || q == 0.0 {
        // Support function of the zero hull.
        return Ok(vel.support(&neg_p).max(0.0));
    }
    let objective = |b: &[f64]| -> f64 {
        match eval_h2ti_star(instance, x, b) {
            Ok(h) if h.is_finite() => dot(p, b) + q * h,
            _ => f64::NEG_INFINITY,
        }
    };
    if q > 0.0 {
        let mut best = objective(&vec![0.0; x.len()]);
        for v in vel.extreme_points(360) {
            let b: Vec<f64> = v.iter().map(|t| -t).collect();
            best = best.max(objective(&b));
        }
        return Ok(best);
    }
    if vel.dim() != 1 {
        return Err(LaxError::Unsupported("nonzero stage cost zero-hull maximisation is implemented in one dimension".into()));
    }
    let (lo, hi, _) = interval_of(&vel);
    let (blo, bhi) = ((-hi).min(0.0), (-lo).max(0.0));
    let (_, v) = golden_min(|b| -objective(&[b]), blo, bhi, GOLDEN_ITERS);
    Ok(-v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem_model::ProblemClass;
    use crate::scenarios::{example_a_with, example_b_with, toy_1d, ExampleAOptions, ExampleBOptions, Toy1d};

    fn b1() -> ProblemInstance {
        example_b_with(&ExampleBOptions { robots: 1, seed: 1, ..Default::default() }).unwrap()
    }

    #[test]
    fn hbar_linear_interval() {
        let inst = toy_1d(Toy1d::default(), ProblemClass::MinMax).unwrap();
        let (v, a) = eval_hbar(&inst, 0.0, &[0.0], 0.0, &[2.0], -1.0).unwrap();
        assert_eq!(v, 2.0);
        assert_eq!(a, vec![-1.0]);
        assert_eq!(eval_h(&inst, 0.0, &[0.3], &[-3.0]).unwrap(), 3.0);
        assert_eq!(eval_h(&inst, 0.0, &[0.3], &[0.0]).unwrap(), 0.0);
    }

    #[test]
    fn hbar_example_b() {
        let inst = b1();
        let x = inst.x0.clone();
        assert!(eval_hbar(&inst, 0.0, &x, 0.0, &[1.0, 1.0], -1.0).unwrap().0.abs() < 1e-15);
        assert!((eval_hbar(&inst, 0.0, &x, 0.0, &[-1.0, 0.0], -1.0).unwrap().0 - 3.0).abs() < 1e-15);
    }

    #[test]
    fn h_example_a_single_robot() {
        let inst = example_a_with(&ExampleAOptions { robots: 1, seed: 3, ..Default::default() }).unwrap();
        let x = vec![1.0, 0.0, 1.0, 0.0];
        let h = eval_h(&inst, 0.0, &x, &[0.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(h.abs() < 1e-12, "{h}");
    }

    #[test]
    fn h_star_examples() {
        let inst = toy_1d(Toy1d::default(), ProblemClass::MinMax).unwrap();
        assert_eq!(eval_h_star(&inst, 0.0, &[0.0], &[0.5]).unwrap(), 0.0);
        assert!(eval_h_star(&inst, 0.0, &[0.0], &[2.0]).unwrap().is_infinite());
        let lq = toy_1d(Toy1d { weight: 1.0, ..Toy1d::default() }, ProblemClass::MinMax).unwrap();
        let v = eval_h_star(&lq, 0.0, &[0.0], &[0.5]).unwrap();
        assert!((v - 0.25).abs() < 1e-12);
        // Independent route: sup over a dense p-grid of p·b - H(p).
        let brute = (0..=8000)
            .map(|i| -20.0 + 40.0 * i as f64 / 8000.0)
            .map(|p| p * 0.5 - eval_h(&lq, 0.0, &[0.0], &[p]).unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((brute - 0.25).abs() < 1e-4, "{brute}");
    }

    #[test]
    fn h2ti_star_examples() {
        let inst = b1();
        let x = inst.x0.clone();
        assert_eq!(eval_h2ti_star(&inst, &x, &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(eval_h2ti_star(&inst, &x, &[-2.0, 0.0]).unwrap(), 0.0);
        assert_eq!(eval_h2ti_star(&inst, &x, &[-0.5, 0.0]).unwrap(), 0.0);
        assert!(eval_h2ti_star(&inst, &x, &[0.5, 0.0]).unwrap().is_infinite());
    }

    #[test]
    fn h2ti_star_perspective_for_quadratic_cost() {
        // f = a, L = a^2: H* = b^2 on [-1,1]; the perspective min over λ of
        // b^2/λ is attained at λ = 1, so the value is b^2.
        let inst = toy_1d(Toy1d { weight: 1.0, ..Toy1d::default() }, ProblemClass::MinMin).unwrap();
        let v = eval_h2ti_star(&inst, &[0.0], &[0.4]).unwrap();
        assert!((v - 0.16).abs() < 1e-8, "{v}");
    }

    #[test]
    fn domain_membership_examples() {
        let inst = b1();
        let x = inst.x0.clone();
        let b = ControlImageSet::new(&inst, 0.0, &x, false).unwrap();
        let (inside, m) = domain_contains(&b, &[-2.0, 0.0]);
        assert!(inside && m < 0.0);
        assert!(!domain_contains(&b, &[-4.0, 0.0]).0);
        let inst2 = example_b_with(&ExampleBOptions { robots: 2, seed: 1, ..Default::default() }).unwrap();
        let z = ControlImageSet::new(&inst2, 0.0, &inst2.x0, true).unwrap();
        assert!(!domain_contains(&z, &[-3.0, 0.0, -0.5, 0.0]).0);
        assert!(domain_contains(&z, &[-0.5, 0.0, -0.5, 0.2]).0);
        // Independent check with the explicit inequality list.
        let explicit = |b: &[f64]| {
            let r = b.len() / 2;
            (0..r).all(|i| b[2 * i] >= -3.0 && b[2 * i + 1].abs() <= 1.0)
                && (0..r).all(|i| {
                    (0..r).all(|j| {
                        b[2 * i] - 3.0 * b[2 * j] >= 0.0
                            && b[2 * i] - b[2 * j] / 3.0 <= 0.0
                            && b[2 * i + 1] - b[2 * j] >= 0.0
                            && b[2 * i + 1] + b[2 * j] <= 0.0
                    })
                })
        };
        assert!(!explicit(&[-3.0, 0.0, -0.5, 0.0]));
        assert!(explicit(&[-0.5, 0.0, -0.5, 0.2]));
    }

    #[test]
    fn hbar_w_matches_h_at_q_minus_one() {
        let inst = b1();
        let x = inst.x0.clone();
        for p in [[1.0, 1.0], [-1.0, 0.3], [0.2, -2.0]] {
            let h = eval_h(&inst, 0.0, &x, &p).unwrap();
            let w = eval_hbar_w(&inst, 0.0, &x, 0.0, &p, -1.0).unwrap();
            assert!((h - w).abs() < 1e-12);
            let h0 = eval_hbar(&inst, 0.0, &x, 0.0, &p, 0.0).unwrap().0;
            let w0 = eval_hbar_w(&inst, 0.0, &x, 0.0, &p, 0.0).unwrap();
            assert!((h0 - w0).abs() < 1e-12);
        }
    }

    #[test]
    fn ball_slab_projection_and_support() {
        let set = ImageSet::BallSlab { offset: vec![0.0, 0.5, 0.0, 0.0], axes: vec![1, 3], radius: 1.0, slab: Some((1, 0.5)) };
        let p = set.project(&[0.0, 0.5, 0.0, 2.0]);
        assert!((p[3] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
        let p = set.project(&[3.0, 3.5, 1.0, 0.0]);
        assert_eq!(p, vec![0.0, 1.5, 0.0, 0.0]);
        // Support against the brute-force maximum over projected samples.
        for q in [[0.0, 1.0, 0.0, 0.2], [0.0, 0.1, 0.0, 1.0], [1.0, -0.3, 0.0, -0.8]] {
            let brute = set.extreme_points(20_000).iter().map(|u| dot(u, &q)).fold(f64::NEG_INFINITY, f64::max);
            // 20k angular samples resolve the slab corner to about 1e-5.
            let s = set.support(&q);
            assert!(s >= brute - 1e-12 && s - brute < 2e-5, "{q:?} {brute} {s}");
        }
    }

    #[test]
    fn zero_hull_of_box() {
        let set = ImageSet::Box { lo: vec![1.0, -1.0], hi: vec![3.0, 1.0] };
        assert!(set.zero_hull_margin(&[0.5, 0.0]) <= 0.0);
        assert!(set.zero_hull_margin(&[0.5, 0.9]) > 0.0);
        let (p, _) = set.zero_hull_project(&[0.5, 0.9]);
        assert!(set.zero_hull_margin(&p) <= 1e-9);
        let (lo, hi) = set.zero_hull_scales(&[2.0, 0.0]).unwrap();
        assert!((lo - 2.0 / 3.0).abs() < 1e-9 && hi == 1.0);
    }

    #[test]
    fn lp_envelope_of_parabola() {
        let pts: Vec<Vec<f64>> = (0..=20).map(|i| vec![-1.0 + 0.1 * i as f64]).collect();
        let costs: Vec<f64> = pts.iter().map(|p| p[0] * p[0]).collect();
        let (v, w) = lp_envelope(&pts, &costs, &[0.25], true, 0.0).unwrap();
        assert!((v - 0.065).abs() < 1e-9, "{v}");
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(lp_envelope(&pts, &costs, &[2.0], true, 0.0).is_none());
    }
}
