//! Forward-Euler transcriptions of the Lax formulae and of the direct
//! problems, plus the structural convexity audit.
//!
//! Lax programs are parameterised by `u[k] ∈ U_k = co f^a(t_k, A)` (or its
//! zero hull when freezing is allowed). The relaxed velocity is
//! `β[k] = -M_k x[k] - u[k]`, so the dynamics rows
//! `x[k+1] - x[k] = -Δ_k β[k]` are satisfied exactly by forward
//! propagation and `β[k] ∈ co B(t_k, x[k])` reduces to `u[k] ∈ U_k`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{LaxError, Result};
use crate::hamiltonian::{envelope_value, ImageSet};
use crate::numerics::golden_min;
use crate::problem_model::{mat_t_vec, mat_vec, ProblemClass, ProblemInstance, Structure, TimeGrid};

/// Which discretised problem a program encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProgramKind {
    /// Lax formula for the MinMax problem.
    Phi1,
    /// Lax formula for the time-varying MinMin problem at a fixed terminal index.
    Phi2 { k_prime: usize },
    /// Lax formula for the time-invariant MinMin problem.
    Phi2Ti,
    /// Direct MinMax transcription over `α`.
    DirectMinMax,
    /// Direct MinMin transcription at a fixed terminal index.
    DirectMinMin { k_prime: usize },
}

impl ProgramKind {
    pub fn is_lax(&self) -> bool {
        matches!(self, ProgramKind::Phi1 | ProgramKind::Phi2 { .. } | ProgramKind::Phi2Ti)
    }

    /// The audit column that governs this program.
    pub fn column(&self) -> &'static str {
        match self {
            ProgramKind::Phi1 => "phi1",
            ProgramKind::Phi2 { .. } => "phi2",
            ProgramKind::Phi2Ti => "phi2_ti",
            ProgramKind::DirectMinMax => "theta1",
            ProgramKind::DirectMinMin { .. } => "theta2",
        }
    }
}

/// How the per-terminal-index costs enter the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "snake_case")]
pub enum Objective {
    /// `min η` with `η ≥ C(k')` for every `k'`.
    Epigraph,
    /// `min C(k')` for one index.
    Fixed(usize),
}

/// Audit verdict attached to a program.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvexityCertificate {
    pub column: String,
    pub convex: bool,
    pub first_failing_row: Option<String>,
}

/// A transcribed program. Decision variables are one control vector per
/// step; states follow by forward propagation from `x0`.
#[derive(Debug, Clone)]
pub struct ConvexProgram {
    pub kind: ProgramKind,
    pub instance: ProblemInstance,
    pub grid: TimeGrid,
    pub objective: Objective,
    /// State constraints apply at nodes `0..=constraint_upto`.
    pub constraint_upto: usize,
    /// `U_k` for Lax programs; empty for direct programs.
    pub images: Vec<ImageSet>,
    /// `M_k` for Lax programs; empty for direct programs.
    pub drift: Vec<DMatrix<f64>>,
    /// Freezing allowed: `u[k]` lives in the zero hull of `U_k`.
    pub zero_hull: bool,
    /// Extra tightening per constrained node: rows read `c + margin <= 0`.
    pub margins: Vec<f64>,
    pub certificate: ConvexityCertificate,
}

/// One stage-cost evaluation with gradients.
pub struct StageEval {
    pub value: f64,
    pub grad_x: Vec<f64>,
    pub grad_w: Vec<f64>,
}

impl ConvexProgram {
    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    /// Length of one control vector.
    pub fn control_dim(&self) -> usize {
        if self.kind.is_lax() {
            self.instance.n()
        } else {
            self.instance.m()
        }
    }

    pub fn x0(&self) -> &[f64] {
        &self.instance.x0
    }

    /// Terminal indices that enter the objective.
    pub fn terminal_indices(&self) -> Vec<usize> {
        match self.objective {
            Objective::Epigraph => (0..=self.steps()).collect(),
            Objective::Fixed(k) => vec![k],
        }
    }

    /// Projection onto the admissible set of step `k`.
    pub fn project(&self, k: usize, w: &[f64]) -> Vec<f64> {
        if !self.kind.is_lax() {
            return self.instance.model.control_set().project(w);
        }
        if self.zero_hull {
            self.images[k].zero_hull_project(w).0
        } else {
            self.images[k].project(w)
        }
    }

    /// Signed membership margin of a control, `<= 0` when admissible.
    pub fn membership_margin(&self, k: usize, w: &[f64]) -> f64 {
        if !self.kind.is_lax() {
            let p = self.instance.model.control_set().project(w);
            return crate::numerics::dist2(&p, w);
        }
        if self.zero_hull {
            self.images[k].zero_hull_margin(w)
        } else {
            self.images[k].margin(w)
        }
    }

    /// Velocity `f` at step `k`.
    pub fn velocity(&self, k: usize, x: &[f64], w: &[f64]) -> Vec<f64> {
        if self.kind.is_lax() {
            let mut v = mat_vec(&self.drift[k], x);
            for (vi, wi) in v.iter_mut().zip(w) {
                *vi += wi;
            }
            v
        } else {
            let mut f = vec![0.0; self.instance.n()];
            self.instance.model.dynamics(self.grid.nodes()[k], x, w, &mut f);
            f
        }
    }

    /// Forward-Euler states for the given controls.
    pub fn propagate(&self, controls: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut states = Vec::with_capacity(self.steps() + 1);
        states.push(self.x0().to_vec());
        for k in 0..self.steps() {
            let x = &states[k];
            let v = self.velocity(k, x, &controls[k]);
            let dt = self.grid.dt(k);
            let next: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + dt * b).collect();
            states.push(next);
        }
        states
    }

    /// Solver-side decision variables recovered from reported controls.
    pub fn decision_from_reported(&self, states: &[Vec<f64>], reported: &[Vec<f64>]) -> Vec<Vec<f64>> {
        if !self.kind.is_lax() {
            return reported.to_vec();
        }
        (0..self.steps())
            .map(|k| {
                let mx = mat_vec(&self.drift[k], &states[k]);
                reported[k].iter().zip(&mx).map(|(b, m)| -b - m).collect()
            })
            .collect()
    }

    /// Relaxed controls `β[k] = -f` for Lax programs, `α[k]` otherwise.
    pub fn reported_controls(&self, states: &[Vec<f64>], controls: &[Vec<f64>]) -> Vec<Vec<f64>> {
        if !self.kind.is_lax() {
            return controls.to_vec();
        }
        (0..self.steps())
            .map(|k| self.velocity(k, &states[k], &controls[k]).iter().map(|v| -v).collect())
            .collect()
    }

    /// Start point: `β ≡ 0` projected into the admissible sets along the
    /// propagated trajectory (`u[k] = P(-M_k x[k])`), or the projection of
    /// zero into `A` for direct programs.
    pub fn initial_controls(&self) -> Vec<Vec<f64>> {
        let mut x = self.x0().to_vec();
        let mut out = Vec::with_capacity(self.steps());
        for k in 0..self.steps() {
            let target = if self.kind.is_lax() {
                mat_vec(&self.drift[k], &x).iter().map(|v| -v).collect()
            } else {
                vec![0.0; self.control_dim()]
            };
            let w = self.project(k, &target);
            let v = self.velocity(k, &x, &w);
            let dt = self.grid.dt(k);
            x = x.iter().zip(&v).map(|(a, b)| a + dt * b).collect();
            out.push(w);
        }
        out
    }

    /// Stage cost at step `k` (per unit time) with gradients, smoothing
    /// parameter unused by the stage terms of the builtin models.
    pub fn stage(&self, k: usize, x: &[f64], w: &[f64]) -> Result<StageEval> {
        let n = self.instance.n();
        let s = self.grid.nodes()[k];
        let model = &self.instance.model;
        let st = model.structure();
        if !self.kind.is_lax() {
            let mut gx = vec![0.0; n];
            let mut gw = vec![0.0; w.len()];
            let value = model.stage_cost_grad(s, x, w, &mut gx, &mut gw);
            return Ok(StageEval { value, grad_x: gx, grad_w: gw });
        }
        if st.stage.zero {
            return Ok(StageEval { value: 0.0, grad_x: vec![0.0; n], grad_w: vec![0.0; n] });
        }
        let mut gx = vec![0.0; n];
        let lx = model.stage_cost_state(s, x, &mut gx);
        let mut gw = vec![0.0; n];
        if !self.zero_hull {
            let l = model
                .envelope(s, w, &mut gw)
                .ok_or_else(|| LaxError::Construction("no envelope of the control cost is declared".into()))?;
            return Ok(StageEval { value: lx + l, grad_x: gx, grad_w: gw });
        }
        // Perspective min over λ of λ (L^x + ℓ(w/λ)).
        let Some((lo, hi)) = self.images[k].zero_hull_scales(w) else {
            return Ok(StageEval { value: f64::INFINITY, grad_x: gx, grad_w: gw });
        };
        if w.iter().all(|v| v.abs() <= 1e-14) {
            let l0 = model.envelope(s, w, &mut gw).unwrap_or(0.0);
            let v = (lx + l0).min(0.0);
            return Ok(StageEval { value: v, grad_x: vec![0.0; n], grad_w: vec![0.0; n] });
        }
        let persp = |lam: f64| {
            let inner: Vec<f64> = w.iter().map(|v| v / lam).collect();
            let mut g = vec![0.0; n];
            model.envelope(s, &inner, &mut g).map_or(f64::INFINITY, |l| lam * (lx + l))
        };
        let (lam, value) = golden_min(persp, lo.max(1e-12), hi, 200);
        let inner: Vec<f64> = w.iter().map(|v| v / lam).collect();
        model.envelope(s, &inner, &mut gw);
        Ok(StageEval { value, grad_x: gx.iter().map(|g| lam * g).collect(), grad_w: gw })
    }

    /// `C(k') = Σ_{k<k'} Δ_k stage_k + g(t_k', x[k'])` for every `k'`,
    /// with the terminal cost smoothed by `mu` (`mu = 0` is exact).
    pub fn cost_curve(&self, states: &[Vec<f64>], controls: &[Vec<f64>], mu: f64) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.steps() + 1);
        let mut acc = 0.0;
        let mut g = vec![0.0; self.instance.n()];
        for kp in 0..=self.steps() {
            if kp > 0 {
                acc += self.grid.dt(kp - 1) * self.stage(kp - 1, &states[kp - 1], &controls[kp - 1])?.value;
            }
            let t = self.grid.nodes()[kp];
            let term = if mu == 0.0 {
                self.instance.model.terminal_cost(t, &states[kp])
            } else {
                self.instance.model.terminal_cost_grad(t, &states[kp], mu, &mut g)
            };
            out.push(acc + term);
        }
        Ok(out)
    }

    /// Exact objective: `max_k' C(k')` or `C(k')`.
    pub fn objective_value(&self, curve: &[f64]) -> f64 {
        match self.objective {
            Objective::Epigraph => curve.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            Objective::Fixed(k) => curve[k],
        }
    }

    /// `c_j(t_k, x[k])` for nodes `0..=constraint_upto`.
    pub fn constraint_values(&self, states: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let nc = self.instance.model.constraint_count();
        (0..=self.constraint_upto)
            .map(|k| {
                let mut c = vec![0.0; nc];
                self.instance.model.constraints(self.grid.nodes()[k], &states[k], &mut c);
                c
            })
            .collect()
    }

    /// Transposed step Jacobians applied to an adjoint: returns
    /// `((I + Δ ∂f/∂x)ᵀ λ, Δ (∂f/∂w)ᵀ λ)`.
    pub fn step_adjoint(&self, k: usize, x: &[f64], w: &[f64], lam: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let dt = self.grid.dt(k);
        if self.kind.is_lax() {
            let mt = mat_t_vec(&self.drift[k], lam);
            let gx = lam.iter().zip(&mt).map(|(l, m)| l + dt * m).collect();
            let gw = lam.iter().map(|l| dt * l).collect();
            (gx, gw)
        } else {
            let (jx, ja) = self.instance.model.dynamics_jacobian(self.grid.nodes()[k], x, w);
            let mt = mat_t_vec(&jx, lam);
            let at = mat_t_vec(&ja, lam);
            (lam.iter().zip(&mt).map(|(l, m)| l + dt * m).collect(), at.iter().map(|a| dt * a).collect())
        }
    }
}

fn affine_images(instance: &ProblemInstance, grid: &TimeGrid) -> Result<(Vec<ImageSet>, Vec<DMatrix<f64>>)> {
    let model = &instance.model;
    let mut images = Vec::with_capacity(grid.steps());
    let mut drift = Vec::with_capacity(grid.steps());
    for k in 0..grid.steps() {
        let s = grid.nodes()[k];
        match (model.drift_matrix(s), model.control_image(s)) {
            (Some(m), Some(u)) => {
                if m.nrows() != instance.n() || m.ncols() != instance.n() || u.dim() != instance.n() {
                    return Err(LaxError::Dimension("drift matrix or control image has the wrong size".into()));
                }
                drift.push(m);
                images.push(u);
            }
            _ => {
                return Err(LaxError::Unsupported(
                    "Lax transcription needs f = M(s)x + f^a(s,a) with a declared control image".into(),
                ))
            }
        }
    }
    Ok((images, drift))
}

fn require_stage_conjugate(instance: &ProblemInstance, grid: &TimeGrid) -> Result<()> {
    let st = instance.model.structure();
    if st.stage.zero {
        return Ok(());
    }
    if !st.stage.separable {
        return Err(LaxError::Construction("stage cost conjugate unavailable: L is not declared separable".into()));
    }
    let s = grid.nodes()[0];
    let u = instance.model.control_image(s).map(|u| u.project(&vec![0.0; instance.n()]));
    let mut g = vec![0.0; instance.n()];
    match u.and_then(|u| instance.model.envelope(s, &u, &mut g)) {
        Some(_) => Ok(()),
        None => Err(LaxError::Construction(
            "stage cost conjugate unavailable: declare the control-cost envelope for nonzero L".into(),
        )),
    }
}

fn certificate(instance: &ProblemInstance, kind: ProgramKind) -> ConvexityCertificate {
    let report = audit_convexity(instance);
    let col = report.columns.into_iter().find(|c| c.column == kind.column()).expect("known column");
    ConvexityCertificate { column: col.column, convex: col.convex, first_failing_row: col.first_failing_row }
}

fn lax_program(instance: &ProblemInstance, grid: &TimeGrid, kind: ProgramKind, objective: Objective, constraint_upto: usize, zero_hull: bool) -> Result<ConvexProgram> {
    check_grid(instance, grid)?;
    let (images, drift) = affine_images(instance, grid)?;
    require_stage_conjugate(instance, grid)?;
    Ok(ConvexProgram {
        kind,
        instance: instance.clone(),
        grid: grid.clone(),
        objective,
        constraint_upto,
        images,
        drift,
        zero_hull,
        margins: vec![0.0; constraint_upto + 1],
        certificate: certificate(instance, kind),
    })
}

fn check_grid(instance: &ProblemInstance, grid: &TimeGrid) -> Result<()> {
    if (grid.horizon() - instance.horizon).abs() > 1e-9 * instance.horizon.max(1.0) {
        return Err(LaxError::InvalidGrid(format!(
            "grid ends at {} but the horizon is {}",
            grid.horizon(),
            instance.horizon
        )));
    }
    Ok(())
}

/// Epigraph program for the MinMax Lax formula, state constraints at all
/// nodes.
pub fn build_phi1_program(instance: &ProblemInstance, grid: &TimeGrid) -> Result<ConvexProgram> {
    if instance.class != ProblemClass::MinMax {
        return Err(LaxError::Invalid("the MinMax Lax program needs a MinMax instance".into()));
    }
    if instance.time_invariant && instance.model.drift_matrix(0.0).is_none() {
        return Err(LaxError::Unsupported("no Lax formula for this time-invariant MinMax instance".into()));
    }
    lax_program(instance, grid, ProgramKind::Phi1, Objective::Epigraph, grid.steps(), false)
}

/// Fixed-endpoint program for the time-invariant MinMin Lax formula; the
/// zero velocity (freezing) is always admissible.
pub fn build_phi2ti_program(instance: &ProblemInstance, grid: &TimeGrid) -> Result<ConvexProgram> {
    if instance.class != ProblemClass::MinMin || !instance.time_invariant {
        return Err(LaxError::Invalid("the freezing Lax program needs a time-invariant MinMin instance".into()));
    }
    let p = lax_program(instance, grid, ProgramKind::Phi2Ti, Objective::Fixed(grid.steps()), grid.steps(), true)?;
    if p.drift.iter().any(|m| m.iter().any(|v| *v != 0.0)) {
        return Err(LaxError::Unsupported("the freezing Lax program needs state-independent dynamics (M = 0)".into()));
    }
    Ok(p)
}

/// MinMin Lax subprogram with the terminal index fixed to `k_prime`; state
/// constraints only on the prefix `0..=k_prime`.
pub fn build_phi2_subprogram(instance: &ProblemInstance, grid: &TimeGrid, k_prime: usize) -> Result<ConvexProgram> {
    if instance.class != ProblemClass::MinMin {
        return Err(LaxError::Invalid("the MinMin Lax program needs a MinMin instance".into()));
    }
    if k_prime > grid.steps() {
        return Err(LaxError::Invalid(format!("terminal index {k_prime} beyond K = {}", grid.steps())));
    }
    lax_program(instance, grid, ProgramKind::Phi2 { k_prime }, Objective::Fixed(k_prime), k_prime, false)
}

fn direct(instance: &ProblemInstance, grid: &TimeGrid, kind: ProgramKind, objective: Objective, upto: usize) -> Result<ConvexProgram> {
    check_grid(instance, grid)?;
    Ok(ConvexProgram {
        kind,
        instance: instance.clone(),
        grid: grid.clone(),
        objective,
        constraint_upto: upto,
        images: Vec::new(),
        drift: Vec::new(),
        zero_hull: false,
        margins: vec![0.0; upto + 1],
        certificate: certificate(instance, kind),
    })
}

/// Direct transcription over `α`: the epigraph MinMax program. MinMin
/// instances are handled per terminal index by
/// [`build_direct_subprogram`].
pub fn build_direct_program(instance: &ProblemInstance, grid: &TimeGrid) -> Result<ConvexProgram> {
    match instance.class {
        ProblemClass::MinMax => direct(instance, grid, ProgramKind::DirectMinMax, Objective::Epigraph, grid.steps()),
        ProblemClass::MinMin => Err(LaxError::Invalid(
            "the direct MinMin problem is a sweep over terminal indices; use build_direct_subprogram".into(),
        )),
    }
}

/// Direct MinMin transcription with the terminal index fixed.
pub fn build_direct_subprogram(instance: &ProblemInstance, grid: &TimeGrid, k_prime: usize) -> Result<ConvexProgram> {
    if instance.class != ProblemClass::MinMin {
        return Err(LaxError::Invalid("direct subprograms are for MinMin instances".into()));
    }
    if k_prime > grid.steps() {
        return Err(LaxError::Invalid(format!("terminal index {k_prime} beyond K = {}", grid.steps())));
    }
    direct(instance, grid, ProgramKind::DirectMinMin { k_prime }, Objective::Fixed(k_prime), k_prime)
}

/// One row of the audit table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowCheck {
    pub condition: String,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnVerdict {
    pub column: String,
    pub convex: bool,
    pub first_failing_row: Option<String>,
    pub rows: Vec<RowCheck>,
}

/// Verdicts for the five discretised problems, in the order
/// `theta1, phi1, theta2, phi2, phi2_ti`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvexityReport {
    pub instance: String,
    pub columns: Vec<ColumnVerdict>,
}

impl ConvexityReport {
    pub fn column(&self, name: &str) -> Option<&ColumnVerdict> {
        self.columns.iter().find(|c| c.column == name)
    }
}

fn verdict(column: &str, rows: Vec<(&str, bool)>) -> ColumnVerdict {
    let rows: Vec<RowCheck> = rows.into_iter().map(|(c, h)| RowCheck { condition: c.to_string(), holds: h }).collect();
    let first = rows.iter().find(|r| !r.holds).map(|r| r.condition.clone());
    ColumnVerdict { column: column.to_string(), convex: first.is_none(), first_failing_row: first, rows }
}

/// Table-driven convexity audit from the declared structure. Verdicts only
/// inform how results are labelled; they never block solving.
pub fn audit_convexity(instance: &ProblemInstance) -> ConvexityReport {
    let Structure { stage, terminal, dynamics, constraint } = instance.model.structure();
    let g_convex = terminal.zero || terminal.convex;
    let c_convex = constraint.state_independent || constraint.convex;
    let columns = vec![
        verdict(
            "theta1",
            vec![
                ("L^x convex in x, L^a convex in a", stage.zero || (stage.separable && stage.state_part_convex && stage.control_part_convex)),
                ("g convex in x", g_convex),
                ("f=M(s)x+N(s)a+C(s)", dynamics.affine),
                ("c convex in x", c_convex),
            ],
        ),
        verdict(
            "phi1",
            vec![
                ("L=L^x+L^a, L^x convex in x", stage.zero || (stage.separable && stage.state_part_convex)),
                ("g convex in x", g_convex),
                ("f=M(s)x+f^a(s,a)", dynamics.state_affine || dynamics.affine),
                ("c convex in x", c_convex),
            ],
        ),
        verdict(
            "theta2",
            vec![
                ("L=0", stage.zero),
                ("g=0", terminal.zero),
                ("f=M(s)x+N(s)a+C(s)", dynamics.affine),
                ("c=c(s)", constraint.state_independent),
            ],
        ),
        verdict(
            "phi2",
            vec![
                ("L=0", stage.zero),
                ("g=0", terminal.zero),
                ("f=M(s)x+f^a(s,a)", dynamics.state_affine || dynamics.affine),
                ("c=c(s)", constraint.state_independent),
            ],
        ),
        verdict(
            "phi2_ti",
            vec![
                ("L^x=0 (L=L^a)", stage.zero || (stage.separable && stage.state_part_zero)),
                ("g=g(x) convex in x", terminal.zero || (terminal.time_invariant && terminal.convex)),
                ("f=f^a(a)", dynamics.control_only),
                ("c convex in x", c_convex),
            ],
        ),
    ];
    ConvexityReport { instance: instance.name.clone(), columns }
}

/// Envelope value used by certificates and tests: `ℓ(t_k, u)`.
pub fn control_cost_envelope(program: &ConvexProgram, k: usize, u: &[f64]) -> Option<f64> {
    envelope_value(&program.instance, program.grid.nodes()[k], u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenarios::{example_a, example_b, toy_minmax, toy_nonzero_l_minmin};

    #[test]
    fn audit_example_a() {
        let r = audit_convexity(&example_a(1, 1).unwrap());
        assert!(r.column("phi1").unwrap().convex);
        let t1 = r.column("theta1").unwrap();
        assert!(!t1.convex);
        assert_eq!(t1.first_failing_row.as_deref(), Some("f=M(s)x+N(s)a+C(s)"));
        assert_eq!(r.column("phi2").unwrap().first_failing_row.as_deref(), Some("g=0"));
        assert_eq!(r.column("phi2_ti").unwrap().first_failing_row.as_deref(), Some("f=f^a(a)"));
    }

    #[test]
    fn audit_example_b() {
        let r = audit_convexity(&example_b(2, 1).unwrap());
        assert!(r.column("phi2_ti").unwrap().convex);
        assert!(r.column("theta1").unwrap().convex);
        assert!(r.column("phi1").unwrap().convex);
        assert_eq!(r.column("theta2").unwrap().first_failing_row.as_deref(), Some("g=0"));
    }

    #[test]
    fn audit_nonzero_stage_cost_minmin() {
        let r = audit_convexity(&toy_nonzero_l_minmin(0.5).unwrap());
        let p2 = r.column("phi2").unwrap();
        assert!(!p2.convex);
        assert_eq!(p2.first_failing_row.as_deref(), Some("L=0"));
    }

    #[test]
    fn builders_check_classes() {
        let grid = TimeGrid::uniform(1.0, 0.25).unwrap();
        let mm = toy_minmax(0.5).unwrap();
        assert!(build_phi2ti_program(&mm, &grid).is_err());
        assert!(build_phi2_subprogram(&mm, &grid, 1).is_err());
        let p = build_phi1_program(&mm, &grid).unwrap();
        assert_eq!(p.terminal_indices().len(), 5);
        assert_eq!(p.steps(), 4);
        let mn = toy_nonzero_l_minmin(0.5).unwrap();
        assert!(build_phi2_subprogram(&mn, &grid, 5).is_err());
        assert!(build_phi1_program(&mn, &grid).is_err());
        let bad = TimeGrid::uniform(2.0, 0.25).unwrap();
        assert!(matches!(build_phi1_program(&mm, &bad), Err(LaxError::InvalidGrid(_))));
    }

    #[test]
    fn propagation_rows_are_exact() {
        let inst = example_a(2, 3).unwrap();
        let grid = TimeGrid::uniform(2.0, 0.1).unwrap();
        let p = build_phi1_program(&inst, &grid).unwrap();
        let w = p.initial_controls();
        let xs = p.propagate(&w);
        let betas = p.reported_controls(&xs, &w);
        for k in 0..p.steps() {
            for i in 0..inst.n() {
                let row = xs[k + 1][i] - xs[k][i] + grid.dt(k) * betas[k][i];
                assert!(row.abs() < 1e-14);
            }
            assert!(p.membership_margin(k, &w[k]) <= 1e-12);
        }
    }

    #[test]
    fn epigraph_objective_is_the_max() {
        let inst = toy_minmax(0.5).unwrap();
        let grid = TimeGrid::uniform(1.0, 0.25).unwrap();
        let p = build_phi1_program(&inst, &grid).unwrap();
        let w = vec![vec![-1.0]; 4];
        let xs = p.propagate(&w);
        let c = p.cost_curve(&xs, &w, 0.0).unwrap();
        assert_eq!(c, vec![0.5, 0.25, 0.0, 0.25, 0.5]);
        assert_eq!(p.objective_value(&c), 0.5);
    }
}
