//! Grid solver for the augmented HJ equations in `(x, z)` with `n <= 2`.
//!
//! Explicit Euler backward in time with a first-order monotone spatial
//! scheme; obstacles are applied nodewise after every step. Two schemes are
//! available: control-wise upwinding over sampled controls (the default)
//! and Lax-Friedrichs with global dissipation bounds. Lax-Friedrichs raises
//! the convex kinks where the two obstacles meet by half a cell, which
//! shows up as a z-convexity defect of order `dz/2`; upwinding is exact
//! there. Edges use one-sided differences (extrapolation); results near
//! the box boundary are unreliable and flagged in the metadata.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LaxError, Result};
use crate::hamiltonian::{eval_h2ti_star, eval_h_star, eval_hbar, eval_hbar_w, eval_hbar_w_ti, ControlImageSet, ImageSet};
use crate::problem_model::ProblemInstance;

/// Which equation to march.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HjKind {
    /// MinMax value, both obstacles, Hamiltonian `H̄`.
    V1,
    /// MinMax value with the conjugate-side Hamiltonian `H̄_W`.
    W1,
    /// MinMin value, `max{c, min{g - z, ·}}`.
    V2,
    /// Time-invariant MinMax form with `min{0, H̄}` and the `c` obstacle.
    V1Ti,
    /// Time-invariant MinMin form with `max{0, H̄}` and the `c` obstacle.
    V2Ti,
    /// Freezing form with `H̄_W^TI` and the `c` obstacle.
    W2Ti,
}

impl HjKind {
    fn time_invariant(self) -> bool {
        matches!(self, HjKind::V1Ti | HjKind::V2Ti | HjKind::W2Ti)
    }
}

/// Spatial discretisation of the Hamiltonian.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// `max` over sampled (velocity, cost) pairs of the upwinded linear
    /// Hamiltonian; for `W` kinds the pairs are sampled relaxed velocities
    /// with the conjugate cost.
    #[default]
    Upwind,
    /// `H̄(mean p, mean q)` minus global dissipation, with the closed-form
    /// Hamiltonians.
    LaxFriedrichs,
}

/// Spatial box, resolutions and the time slices to keep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HjGrids {
    pub x_lo: Vec<f64>,
    pub x_hi: Vec<f64>,
    pub dx: Vec<f64>,
    pub dz: f64,
    /// Defaults to `[min g - 1, max g + T max|L| + 1]` over the box.
    pub z_range: Option<(f64, f64)>,
    /// Start time of the march; the terminal time is the horizon.
    pub t0: f64,
    /// Times whose slices are stored; `t0` and `T` are always kept.
    pub save_times: Vec<f64>,
    pub cfl: f64,
    #[serde(default)]
    pub scheme: Scheme,
}

impl HjGrids {
    pub fn new(x_lo: Vec<f64>, x_hi: Vec<f64>, dx: Vec<f64>, dz: f64) -> Self {
        HjGrids { x_lo, x_hi, dx, dz, z_range: None, t0: 0.0, save_times: Vec::new(), cfl: 0.8, scheme: Scheme::Upwind }
    }
}

/// Scheme parameters recorded alongside the values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchemeMeta {
    pub kind: HjKind,
    pub scheme: Scheme,
    /// Sampled (velocity, cost) pairs per node for the upwind scheme.
    pub samples_per_node: usize,
    pub dt: f64,
    pub steps: usize,
    pub cfl_number: f64,
    pub alpha_x: Vec<f64>,
    pub alpha_z: f64,
    pub boundary: String,
}

/// Values on a tensor grid; slice `j` is stored flat with the z index
/// fastest, then the last x axis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridValueFunction {
    pub x_axes: Vec<Vec<f64>>,
    pub z_axis: Vec<f64>,
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub meta: SchemeMeta,
}

fn axis(lo: f64, hi: f64, h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) || !(hi > lo) {
        return Err(LaxError::InvalidGrid(format!("bad axis [{lo}, {hi}] with step {h}")));
    }
    let cells = ((hi - lo) / h).round() as usize;
    if ((cells as f64) * h - (hi - lo)).abs() > 1e-9 * (hi - lo) {
        return Err(LaxError::InvalidGrid(format!("step {h} does not divide [{lo}, {hi}]")));
    }
    Ok((0..=cells).map(|i| lo + i as f64 * h).collect())
}

struct Layout {
    dims: Vec<usize>,
    nz: usize,
}

impl Layout {
    fn x_count(&self) -> usize {
        self.dims.iter().product()
    }
    fn len(&self) -> usize {
        self.x_count() * self.nz
    }
    fn x_index(&self, flat_x: usize) -> Vec<usize> {
        let mut out = vec![0; self.dims.len()];
        let mut r = flat_x;
        for d in (0..self.dims.len()).rev() {
            out[d] = r % self.dims[d];
            r /= self.dims[d];
        }
        out
    }
    /// Flat offset of the neighbour along x axis `d`.
    fn x_stride(&self, d: usize) -> usize {
        self.dims[d + 1..].iter().product::<usize>() * self.nz
    }
}

impl GridValueFunction {
    fn layout(&self) -> Layout {
        Layout { dims: self.x_axes.iter().map(|a| a.len()).collect(), nz: self.z_axis.len() }
    }

    pub fn slice_index(&self, t: f64) -> Result<usize> {
        self.times.iter().position(|s| (s - t).abs() <= 1e-9).ok_or_else(|| {
            LaxError::Invalid(format!("no stored slice at t = {t}; stored: {:?}", self.times))
        })
    }

    /// `V` at a grid node.
    pub fn at(&self, slice: usize, xi: &[usize], l: usize) -> f64 {
        let lay = self.layout();
        let mut flat = 0;
        for d in 0..xi.len() {
            flat = flat * lay.dims[d] + xi[d];
        }
        self.values[slice][flat * lay.nz + l]
    }

    /// Multilinear interpolation in `x` at every z node.
    pub fn z_profile(&self, slice: usize, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.x_axes.len() {
            return Err(LaxError::Dimension(format!("point has {} coordinates, grid has {}", x.len(), self.x_axes.len())));
        }
        let lay = self.layout();
        let mut corners: Vec<(usize, f64)> = vec![(0, 1.0)];
        for (d, ax) in self.x_axes.iter().enumerate() {
            let (lo, hi) = (ax[0], ax[ax.len() - 1]);
            if x[d] < lo - 1e-12 || x[d] > hi + 1e-12 {
                return Err(LaxError::Range { value: x[d], lo, hi });
            }
            let h = ax[1] - ax[0];
            let i = (((x[d] - lo) / h).floor() as usize).min(ax.len() - 2);
            let frac = ((x[d] - ax[i]) / h).clamp(0.0, 1.0);
            let mut next = Vec::with_capacity(corners.len() * 2);
            for (flat, wgt) in corners {
                next.push((flat * lay.dims[d] + i, wgt * (1.0 - frac)));
                next.push((flat * lay.dims[d] + i + 1, wgt * frac));
            }
            corners = next;
        }
        let vals = &self.values[slice];
        Ok((0..lay.nz)
            .map(|l| corners.iter().filter(|c| c.1 != 0.0).map(|(f, w)| w * vals[f * lay.nz + l]).sum())
            .collect())
    }

    /// Little-endian f64 dump of every stored slice, slice-major.
    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.values.iter().map(|v| v.len() * 8).sum());
        for v in &self.values {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Header describing the binary layout.
    pub fn header(&self) -> serde_json::Value {
        let mut shape: Vec<usize> = vec![self.times.len()];
        shape.extend(self.x_axes.iter().map(|a| a.len()));
        shape.push(self.z_axis.len());
        serde_json::json!({
            "format": "f64-le",
            "order": "time, x axes, z (z fastest)",
            "shape": shape,
            "times": self.times,
            "x_axes": self.x_axes,
            "z_axis": self.z_axis,
            "scheme": self.meta,
        })
    }

    /// CSV rows `x_0[,x_1],z,value` for one stored slice.
    pub fn csv_slice(&self, slice: usize) -> String {
        let lay = self.layout();
        let mut s = String::new();
        for d in 0..self.x_axes.len() {
            s.push_str(&format!("x_{d},"));
        }
        s.push_str("z,value\n");
        for fx in 0..lay.x_count() {
            let xi = lay.x_index(fx);
            for l in 0..lay.nz {
                for (d, i) in xi.iter().enumerate() {
                    s.push_str(&format!("{},", self.x_axes[d][*i]));
                }
                s.push_str(&format!("{},{}\n", self.z_axis[l], self.values[slice][fx * lay.nz + l]));
            }
        }
        s
    }
}

fn sample_bounds(instance: &ProblemInstance, x_axes: &[Vec<f64>], times: &[f64]) -> (Vec<f64>, f64, f64, f64) {
    let model = &instance.model;
    let n = instance.n();
    let controls = model.control_set().samples(21);
    let mut alpha = vec![0.0_f64; n];
    let mut lmax = 0.0_f64;
    let (mut gmin, mut gmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let pts: Vec<Vec<f64>> = {
        let stride: Vec<usize> = x_axes.iter().map(|a| (a.len() / 60).max(1)).collect();
        let mut pts = vec![Vec::new()];
        for (d, ax) in x_axes.iter().enumerate() {
            let mut picks: Vec<f64> = ax.iter().step_by(stride[d]).cloned().collect();
            picks.push(ax[ax.len() - 1]);
            pts = pts.into_iter().flat_map(|p: Vec<f64>| picks.iter().map(move |v| [p.clone(), vec![*v]].concat())).collect();
        }
        pts
    };
    let mut f = vec![0.0; n];
    for &s in times {
        for x in &pts {
            let g = model.terminal_cost(s, x);
            gmin = gmin.min(g);
            gmax = gmax.max(g);
            for a in &controls {
                model.dynamics(s, x, a, &mut f);
                for i in 0..n {
                    alpha[i] = alpha[i].max(f[i].abs());
                }
                lmax = lmax.max(model.stage_cost(s, x, a).abs());
            }
        }
    }
    (alpha, lmax, gmin, gmax)
}

/// March the chosen equation from the terminal time back to `grids.t0`.
pub fn solve_hj(instance: &ProblemInstance, kind: HjKind, grids: &HjGrids) -> Result<GridValueFunction> {
    let n = instance.n();
    if n > 2 {
        return Err(LaxError::Unsupported(format!("grid oracle supports n <= 2, got n = {n}")));
    }
    if grids.x_lo.len() != n || grids.x_hi.len() != n || grids.dx.len() != n {
        return Err(LaxError::Dimension("grid box does not match the state dimension".into()));
    }
    if kind.time_invariant() && !instance.time_invariant {
        return Err(LaxError::Invalid(format!("{kind:?} needs a time-invariant instance")));
    }
    let horizon = instance.horizon;
    if !(grids.t0 >= 0.0 && grids.t0 < horizon) {
        return Err(LaxError::InvalidGrid(format!("start time {} outside [0, {horizon})", grids.t0)));
    }
    let x_axes: Vec<Vec<f64>> = (0..n).map(|d| axis(grids.x_lo[d], grids.x_hi[d], grids.dx[d])).collect::<Result<_>>()?;
    let (alpha_x, lmax, gmin, gmax) = sample_bounds(instance, &x_axes, &[grids.t0, 0.5 * (grids.t0 + horizon), horizon]);
    let (zlo, zhi) = grids.z_range.unwrap_or((gmin - 1.0, gmax + horizon * lmax + 1.0));
    let cells = ((zhi - zlo) / grids.dz).ceil().max(2.0) as usize;
    let z_axis: Vec<f64> = (0..=cells).map(|l| zlo + l as f64 * grids.dz).collect();
    let mut alpha_x = alpha_x;
    let mut alpha_z = lmax;
    let cached = if grids.scheme == Scheme::Upwind && (instance.time_invariant || kind.time_invariant()) {
        let t = all_tables(instance, kind, 0.0, &x_axes)?;
        for table in &t {
            for (f, l) in table {
                for d in 0..n {
                    alpha_x[d] = alpha_x[d].max(f[d].abs());
                }
                alpha_z = alpha_z.max(l.abs());
            }
        }
        Some(t)
    } else {
        None
    };
    let lay = Layout { dims: x_axes.iter().map(|a| a.len()).collect(), nz: z_axis.len() };

    let rate: f64 = alpha_x.iter().zip(&grids.dx).map(|(a, h)| a / h).sum::<f64>() + alpha_z / grids.dz;
    let dt_max = if rate > 0.0 { grids.cfl / rate } else { horizon - grids.t0 };

    // Segment boundaries: saved times, descending from T.
    let mut marks: Vec<f64> = grids.save_times.iter().cloned().filter(|t| *t > grids.t0 && *t < horizon).collect();
    marks.push(grids.t0);
    marks.sort_by(|a, b| b.total_cmp(a));
    marks.dedup_by(|a, b| (*a - *b).abs() <= 1e-12);

    let model = &instance.model;
    let nc = model.constraint_count();
    let obstacles = |t: f64| -> (Vec<f64>, Vec<f64>) {
        let mut c_vals = Vec::with_capacity(lay.x_count());
        let mut g_vals = Vec::with_capacity(lay.x_count());
        let mut c = vec![0.0; nc];
        for fx in 0..lay.x_count() {
            let xi = lay.x_index(fx);
            let x: Vec<f64> = xi.iter().enumerate().map(|(d, i)| x_axes[d][*i]).collect();
            let cmax = if nc == 0 {
                f64::NEG_INFINITY
            } else {
                model.constraints(t, &x, &mut c);
                c.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            };
            c_vals.push(cmax);
            g_vals.push(model.terminal_cost(t, &x));
        }
        (c_vals, g_vals)
    };

    let (c_t, g_t) = obstacles(horizon);
    let mut v = vec![0.0; lay.len()];
    for fx in 0..lay.x_count() {
        for (l, z) in z_axis.iter().enumerate() {
            v[fx * lay.nz + l] = c_t[fx].max(g_t[fx] - z);
        }
    }
    let mut times = vec![horizon];
    let mut values = vec![v.clone()];
    let mut t = horizon;
    let mut steps = 0;
    let mut dt_used: f64 = 0.0;
    for &target in &marks {
        let span = t - target;
        let k = (span / dt_max).ceil().max(1.0) as usize;
        let dt = span / k as f64;
        dt_used = dt_used.max(dt);
        for _ in 0..k {
            let s_h = if kind.time_invariant() { 0.0 } else { t };
            let t_next = t - dt;
            let (c_o, g_o) = obstacles(t_next);
            v = match grids.scheme {
                Scheme::LaxFriedrichs => {
                    step(instance, kind, &v, &lay, &x_axes, &z_axis, grids, &alpha_x, alpha_z, s_h, dt, &c_o, &g_o)?
                }
                Scheme::Upwind => {
                    let fresh;
                    let tables = match &cached {
                        Some(t) => t,
                        None => {
                            fresh = all_tables(instance, kind, s_h, &x_axes)?;
                            &fresh
                        }
                    };
                    step_upwind(kind, &v, &lay, &z_axis, grids, tables, dt, &c_o, &g_o)
                }
            };
            t = t_next;
            steps += 1;
        }
        t = target;
        times.push(target);
        values.push(v.clone());
    }
    // Ascending time order.
    times.reverse();
    values.reverse();
    Ok(GridValueFunction {
        x_axes,
        z_axis,
        times,
        values,
        meta: SchemeMeta {
            kind,
            scheme: grids.scheme,
            samples_per_node: cached.as_ref().map_or(0, |t| t.first().map_or(0, |x| x.len())),
            dt: dt_used,
            steps,
            cfl_number: dt_used * rate,
            alpha_x,
            alpha_z,
            boundary: "one-sided differences at the box edges (extrapolation); keep probes away from the edges".into(),
        },
    })
}


type Table = Vec<(Vec<f64>, f64)>;

fn node_point(lay: &Layout, x_axes: &[Vec<f64>], fx: usize) -> Vec<f64> {
    lay.x_index(fx).iter().enumerate().map(|(d, i)| x_axes[d][*i]).collect()
}

/// Interior sample of a low-dimensional image set.
fn image_samples(set: &ImageSet) -> Vec<Vec<f64>> {
    match set {
        ImageSet::Box { lo, hi } => {
            let per = if lo.len() == 1 { 41 } else { 15 };
            let mut pts = vec![Vec::new()];
            for d in 0..lo.len() {
                let vals: Vec<f64> =
                    (0..per).map(|i| lo[d] + (hi[d] - lo[d]) * i as f64 / (per - 1) as f64).collect();
                pts = pts.into_iter().flat_map(|p: Vec<f64>| vals.iter().map(move |v| [p.clone(), vec![*v]].concat())).collect();
            }
            pts
        }
        other => {
            let ext = other.extreme_points(64);
            let dim = other.dim();
            let c: Vec<f64> = (0..dim).map(|i| ext.iter().map(|e| e[i]).sum::<f64>() / ext.len() as f64).collect();
            let mut out = vec![c.clone()];
            for e in &ext {
                for th in [0.25, 0.5, 0.75, 1.0] {
                    out.push((0..dim).map(|i| c[i] + th * (e[i] - c[i])).collect());
                }
            }
            out
        }
    }
}

/// (velocity, running cost) pairs whose upwinded maximum is the scheme's
/// Hamiltonian at one node.
fn control_table(instance: &ProblemInstance, kind: HjKind, s: f64, x: &[f64]) -> Result<Table> {
    let model = &instance.model;
    let n = instance.n();
    match kind {
        HjKind::V1 | HjKind::V2 | HjKind::V1Ti | HjKind::V2Ti => {
            let per = if instance.m() == 1 { 41 } else { 15 };
            let mut out = Vec::new();
            for a in model.control_set().samples(per) {
                let mut f = vec![0.0; n];
                model.dynamics(s, x, &a, &mut f);
                out.push((f, model.stage_cost(s, x, &a)));
            }
            Ok(out)
        }
        HjKind::W1 => {
            let img = ControlImageSet::new(instance, s, x, false)?;
            let mut out = Vec::new();
            for v in image_samples(&img.velocities) {
                let b: Vec<f64> = v.iter().map(|t| -t).collect();
                let h = eval_h_star(instance, s, x, &b)?;
                if h.is_finite() {
                    out.push((v, h));
                }
            }
            Ok(out)
        }
        HjKind::W2Ti => {
            let img = ControlImageSet::new(instance, 0.0, x, true)?;
            let mut out = vec![(vec![0.0; n], eval_h2ti_star(instance, x, &vec![0.0; n])?)];
            for v in image_samples(&img.velocities) {
                for i in 1..=8 {
                    let lam = i as f64 / 8.0;
                    let f: Vec<f64> = v.iter().map(|t| lam * t).collect();
                    let b: Vec<f64> = f.iter().map(|t| -t).collect();
                    let h = eval_h2ti_star(instance, x, &b)?;
                    if h.is_finite() {
                        out.push((f, h));
                    }
                }
            }
            Ok(out)
        }
    }
}

fn all_tables(instance: &ProblemInstance, kind: HjKind, s: f64, x_axes: &[Vec<f64>]) -> Result<Vec<Table>> {
    let lay = Layout { dims: x_axes.iter().map(|a| a.len()).collect(), nz: 1 };
    (0..lay.x_count())
        .into_par_iter()
        .map(|fx| control_table(instance, kind, s, &node_point(&lay, x_axes, fx)).map(prune_table))
        .collect()
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Vertices of the planar convex hull (monotone chain).
fn hull_2d(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() <= 2 {
        return pts;
    }
    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// For one state dimension the upwinded term is linear in `(f, cost)` on
/// each sign quadrant, so only the quadrant hull vertices can attain the
/// maximum. Larger tables are left as they are.
fn prune_table(table: Table) -> Table {
    if table.first().map_or(true, |(f, _)| f.len() != 1) {
        return table;
    }
    let mut keep: Vec<(f64, f64)> = Vec::new();
    for sf in [1.0, -1.0] {
        for sc in [1.0, -1.0] {
            let quad: Vec<(f64, f64)> =
                table.iter().map(|(f, c)| (f[0], *c)).filter(|(f, c)| sf * f >= 0.0 && sc * c >= 0.0).collect();
            keep.extend(hull_2d(quad));
        }
    }
    keep.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    keep.dedup();
    keep.into_iter().map(|(f, c)| (vec![f], c)).collect()
}

#[allow(clippy::too_many_arguments)]
fn step_upwind(
    kind: HjKind,
    v: &[f64],
    lay: &Layout,
    z_axis: &[f64],
    grids: &HjGrids,
    tables: &[Table],
    dt: f64,
    c_o: &[f64],
    g_o: &[f64],
) -> Vec<f64> {
    let n = lay.dims.len();
    let nz = lay.nz;
    let strides: Vec<usize> = (0..n).map(|d| lay.x_stride(d)).collect();
    let cols: Vec<Vec<f64>> = (0..lay.x_count())
        .into_par_iter()
        .map(|fx| {
            let xi = lay.x_index(fx);
            let table = &tables[fx];
            let mut col = Vec::with_capacity(nz);
            let mut pm = vec![0.0; n];
            let mut pp = vec![0.0; n];
            for l in 0..nz {
                let idx = fx * nz + l;
                for d in 0..n {
                    let st = strides[d];
                    let h = grids.dx[d];
                    let a = (xi[d] > 0).then(|| (v[idx] - v[idx - st]) / h);
                    let b = (xi[d] + 1 < lay.dims[d]).then(|| (v[idx + st] - v[idx]) / h);
                    pm[d] = a.or(b).unwrap_or(0.0);
                    pp[d] = b.or(a).unwrap_or(0.0);
                }
                let a = (l > 0).then(|| (v[idx] - v[idx - 1]) / grids.dz);
                let b = (l + 1 < nz).then(|| (v[idx + 1] - v[idx]) / grids.dz);
                let (qm, qp) = (a.or(b).unwrap_or(0.0), b.or(a).unwrap_or(0.0));
                let mut h = f64::NEG_INFINITY;
                for (f, cost) in table {
                    let mut t = 0.0;
                    for d in 0..n {
                        t -= if f[d] > 0.0 { f[d] * pp[d] } else { f[d] * pm[d] };
                    }
                    t += if *cost > 0.0 { cost * qm } else { cost * qp };
                    h = h.max(t);
                }
                let h = match kind {
                    HjKind::V1Ti => h.min(0.0),
                    HjKind::V2Ti => h.max(0.0),
                    _ => h,
                };
                let update = v[idx] - dt * h;
                let z = z_axis[l];
                let (c, gz) = (c_o[fx], g_o[fx] - z);
                col.push(match kind {
                    HjKind::V1 | HjKind::W1 => c.max(gz).max(update),
                    HjKind::V2 => c.max(gz.min(update)),
                    HjKind::V1Ti | HjKind::V2Ti | HjKind::W2Ti => c.max(update),
                });
            }
            col
        })
        .collect();
    cols.concat()
}

#[allow(clippy::too_many_arguments)]
fn step(
    instance: &ProblemInstance,
    kind: HjKind,
    v: &[f64],
    lay: &Layout,
    x_axes: &[Vec<f64>],
    z_axis: &[f64],
    grids: &HjGrids,
    alpha_x: &[f64],
    alpha_z: f64,
    s: f64,
    dt: f64,
    c_o: &[f64],
    g_o: &[f64],
) -> Result<Vec<f64>> {
    let n = x_axes.len();
    let nz = lay.nz;
    let strides: Vec<usize> = (0..n).map(|d| lay.x_stride(d)).collect();
    let out: Vec<Result<Vec<f64>>> = (0..lay.x_count())
        .into_par_iter()
        .map(|fx| {
            let xi = lay.x_index(fx);
            let x: Vec<f64> = xi.iter().enumerate().map(|(d, i)| x_axes[d][*i]).collect();
            let mut col = Vec::with_capacity(nz);
            let mut p = vec![0.0; n];
            for l in 0..nz {
                let idx = fx * nz + l;
                let mut diss = 0.0;
                for d in 0..n {
                    let h = grids.dx[d];
                    let last = lay.dims[d] - 1;
                    let st = strides[d];
                    let (mut pm, mut pp) = (None, None);
                    if xi[d] > 0 {
                        pm = Some((v[idx] - v[idx - st]) / h);
                    }
                    if xi[d] < last {
                        pp = Some((v[idx + st] - v[idx]) / h);
                    }
                    let (pm, pp) = (pm.or(pp).unwrap_or(0.0), pp.or(pm).unwrap_or(0.0));
                    p[d] = 0.5 * (pm + pp);
                    diss += alpha_x[d] * 0.5 * (pp - pm);
                }
                let qm = if l > 0 { Some((v[idx] - v[idx - 1]) / grids.dz) } else { None };
                let qp = if l + 1 < nz { Some((v[idx + 1] - v[idx]) / grids.dz) } else { None };
                let (qm, qp) = (qm.or(qp).unwrap_or(0.0), qp.or(qm).unwrap_or(0.0));
                let q = 0.5 * (qm + qp);
                diss += alpha_z * 0.5 * (qp - qm);
                let z = z_axis[l];
                let h = match kind {
                    HjKind::V1 | HjKind::V2 => eval_hbar(instance, s, &x, z, &p, q)?.0,
                    HjKind::V1Ti => eval_hbar(instance, s, &x, z, &p, q)?.0.min(0.0),
                    HjKind::V2Ti => eval_hbar(instance, s, &x, z, &p, q)?.0.max(0.0),
                    HjKind::W1 => eval_hbar_w(instance, s, &x, z, &p, q)?,
                    HjKind::W2Ti => eval_hbar_w_ti(instance, &x, z, &p, q)?,
                };
                let update = v[idx] - dt * (h - diss);
                let c = c_o[fx];
                let gz = g_o[fx] - z;
                let new = match kind {
                    HjKind::V1 | HjKind::W1 => c.max(gz).max(update),
                    HjKind::V2 => c.max(gz.min(update)),
                    HjKind::V1Ti | HjKind::V2Ti | HjKind::W2Ti => c.max(update),
                };
                col.push(new);
            }
            Ok(col)
        })
        .collect();
    let mut next = Vec::with_capacity(v.len());
    for col in out {
        next.extend(col?);
    }
    Ok(next)
}

/// `min z` with interpolated `V(t, x, z) <= 0`, refined by the linear
/// crossing between bracketing z nodes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThetaEstimate {
    pub value: f64,
    pub note: Option<String>,
}

pub fn extract_theta(vf: &GridValueFunction, t: f64, x: &[f64]) -> Result<ThetaEstimate> {
    let slice = vf.slice_index(t)?;
    let prof = vf.z_profile(slice, x)?;
    theta_from_profile(&vf.z_axis, &prof)
}

pub(crate) fn theta_from_profile(z: &[f64], prof: &[f64]) -> Result<ThetaEstimate> {
    match prof.iter().position(|v| *v <= 0.0) {
        None => Ok(ThetaEstimate { value: f64::INFINITY, note: Some("z-range exhausted".into()) }),
        Some(0) => Ok(ThetaEstimate { value: z[0], note: Some("crossing at the lower z edge".into()) }),
        Some(l) => {
            let (a, b) = (prof[l - 1], prof[l]);
            let frac = if a - b > 0.0 { a / (a - b) } else { 1.0 };
            Ok(ThetaEstimate { value: z[l - 1] + frac * (z[l] - z[l - 1]), note: None })
        }
    }
}

/// Worst offender of a regularity check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Offender {
    pub time: f64,
    pub x: Vec<f64>,
    pub z: f64,
    pub defect: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZRegularityReport {
    pub tol: f64,
    pub convexity_defect: f64,
    pub convexity_worst: Option<Offender>,
    /// Violation of `V(z) - zbar <= V(z + zbar) <= V(z)` over all grid pairs.
    pub window_defect: f64,
    pub window_worst: Option<Offender>,
    pub passed: bool,
}

/// Midpoint convexity and the window inequality in `z` at every stored node.
pub fn check_z_regularity(vf: &GridValueFunction, tol: f64) -> ZRegularityReport {
    let lay = vf.layout();
    let nz = lay.nz;
    let mut conv: (f64, Option<Offender>) = (0.0, None);
    let mut win: (f64, Option<Offender>) = (0.0, None);
    let z = &vf.z_axis;
    for (si, vals) in vf.values.iter().enumerate() {
        for fx in 0..lay.x_count() {
            let col = &vals[fx * nz..(fx + 1) * nz];
            let here = |l: usize, d: f64| {
                let xi = lay.x_index(fx);
                Offender {
                    time: vf.times[si],
                    x: xi.iter().enumerate().map(|(dd, i)| vf.x_axes[dd][*i]).collect(),
                    z: z[l],
                    defect: d,
                }
            };
            for l in 1..nz.saturating_sub(1) {
                let d = col[l] - 0.5 * (col[l - 1] + col[l + 1]);
                if d > conv.0 {
                    conv = (d, Some(here(l, d)));
                }
            }
            // Running extremes give the worst pair ending at each node.
            let mut min_prev = col[0];
            let mut max_shift = col[0] + z[0];
            for l in 1..nz {
                let up = col[l] - min_prev;
                let down = max_shift - (col[l] + z[l]);
                let d = up.max(down);
                if d > win.0 {
                    win = (d, Some(here(l, d)));
                }
                min_prev = min_prev.min(col[l]);
                max_shift = max_shift.max(col[l] + z[l]);
            }
        }
    }
    ZRegularityReport {
        tol,
        passed: conv.0 <= tol && win.0 <= tol,
        convexity_defect: conv.0,
        convexity_worst: conv.1,
        window_defect: win.0,
        window_worst: win.1,
    }
}

/// Sup-norm difference between two grids on their common stored slices.
pub fn sup_difference(a: &GridValueFunction, b: &GridValueFunction) -> Result<f64> {
    if a.x_axes != b.x_axes || a.z_axis != b.z_axis || a.times != b.times {
        return Err(LaxError::Dimension("grids differ in axes or stored times".into()));
    }
    Ok(a.values
        .iter()
        .zip(&b.values)
        .flat_map(|(u, v)| u.iter().zip(v).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem_model::ProblemClass;
    use crate::scenarios::{toy_1d, toy_minmax, Toy1d, ToyConstraint, ToyTerminal};

    fn coarse() -> HjGrids {
        HjGrids::new(vec![-2.0], vec![2.0], vec![0.05], 0.05)
    }

    #[test]
    fn terminal_slice_is_exact() {
        let cfg = Toy1d { terminal: ToyTerminal::Abs { goal: 0.0 }, constraint: ToyConstraint::Const(-1.0), ..Toy1d::default() };
        let inst = toy_1d(cfg, ProblemClass::MinMax).unwrap();
        let vf = solve_hj(&inst, HjKind::V1, &coarse()).unwrap();
        let last = vf.times.len() - 1;
        assert_eq!(vf.times[last], 1.0);
        for (i, x) in vf.x_axes[0].iter().enumerate() {
            for (l, z) in vf.z_axis.iter().enumerate() {
                assert_eq!(vf.at(last, &[i], l), (-1.0f64).max(x.abs() - z));
            }
        }
        let zi = vf.z_axis.iter().position(|z| z.abs() < 1e-12).unwrap();
        let xi = vf.x_axes[0].iter().position(|x| (x - 0.5).abs() < 1e-12).unwrap();
        assert!((vf.at(last, &[xi], zi) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn toy_theta_near_analytic() {
        let inst = toy_minmax(0.5).unwrap();
        let vf = solve_hj(&inst, HjKind::V1, &coarse()).unwrap();
        let th = extract_theta(&vf, 0.0, &[0.5]).unwrap();
        assert!((th.value - 0.5).abs() < 0.1, "{}", th.value);
        let rep = check_z_regularity(&vf, 1e-3);
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn linear_profile_crossing() {
        let z: Vec<f64> = (0..11).map(|i| i as f64 * 0.1).collect();
        let prof: Vec<f64> = z.iter().map(|v| 0.55 - v).collect();
        assert!((theta_from_profile(&z, &prof).unwrap().value - 0.55).abs() < 1e-12);
        let pos = vec![1.0; 11];
        assert!(theta_from_profile(&z, &pos).unwrap().value.is_infinite());
    }

    #[test]
    fn bumped_node_is_flagged() {
        let inst = toy_minmax(0.5).unwrap();
        let mut vf = solve_hj(&inst, HjKind::V1, &coarse()).unwrap();
        let nz = vf.z_axis.len();
        let target = 40 * nz + nz / 2;
        vf.values[0][target] += 0.1;
        let rep = check_z_regularity(&vf, 1e-3);
        assert!(!rep.passed);
        let w = rep.convexity_worst.unwrap();
        assert_eq!(w.x, vec![vf.x_axes[0][40]]);
        assert_eq!(w.z, vf.z_axis[nz / 2]);
    }

    #[test]
    fn pruning_keeps_the_maximum() {
        let table: Table = (0..41)
            .map(|i| {
                let a = -1.0 + 0.05 * i as f64;
                (vec![a + 0.5], a * a - 0.3)
            })
            .collect();
        let pruned = prune_table(table.clone());
        let flat: Table = (0..41).map(|i| (vec![-1.0 + 0.05 * i as f64], 0.0)).collect();
        assert_eq!(prune_table(flat).len(), 3);
        let eval = |t: &Table, pm: f64, pp: f64, qm: f64, qp: f64| {
            t.iter()
                .map(|(f, c)| {
                    let fx = if f[0] > 0.0 { f[0] * pp } else { f[0] * pm };
                    -fx + if *c > 0.0 { c * qm } else { c * qp }
                })
                .fold(f64::NEG_INFINITY, f64::max)
        };
        for (pm, pp, qm, qp) in [(1.0, -2.0, -1.0, -0.5), (-0.3, 0.7, -2.0, 0.0), (0.0, 0.0, -1.0, -1.0), (2.0, 2.0, 0.5, -3.0)] {
            assert!((eval(&table, pm, pp, qm, qp) - eval(&pruned, pm, pp, qm, qp)).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_large_state() {
        let a = crate::scenarios::example_a(1, 1).unwrap();
        let g4 = HjGrids::new(vec![0.0; 4], vec![1.0; 4], vec![0.5; 4], 0.5);
        assert!(matches!(solve_hj(&a, HjKind::V1, &g4), Err(LaxError::Unsupported(_))));
    }
}
