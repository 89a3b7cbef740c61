//! State-constrained optimal control through Lax-type formulae.
//!
//! The library covers two problem classes: minimising the maximum of a
//! running cost over the horizon ([`ProblemClass::MinMax`]) and minimising
//! its minimum ([`ProblemClass::MinMin`]). Problems are transcribed into
//! convex programs over relaxed velocities, solved by an augmented
//! Lagrangian method, and turned back into admissible controls. A grid
//! Hamilton-Jacobi solver for low-dimensional instances serves as an
//! independent oracle.

pub mod convex_solver;
pub mod error;
pub mod hamiltonian;
pub mod hj_oracle;
pub mod lax_transcription;
mod numerics;
pub mod problem_model;
pub mod reconstruction;
pub mod scenarios;

pub use convex_solver::{certify, solve, solve_phi2_sweep, ResidualReport, Solution, SolveStatus, SolverOptions};
pub use error::{LaxError, Result};
pub use hamiltonian::{ControlImageSet, ImageSet};
pub use hj_oracle::{GridValueFunction, HjGrids, HjKind};
pub use lax_transcription::{
    audit_convexity, build_direct_program, build_phi1_program, build_phi2ti_program, ConvexProgram, ConvexityReport,
    ProgramKind,
};
pub use problem_model::{
    check_feasibility, evaluate_problem_value, evaluate_running_objective, integrate_dynamics, ControlSet,
    FeasibilityReport, Model, NormTerm, ProblemClass, ProblemInstance, ProblemValue, Structure, TimeGrid, Trajectory,
};
pub use reconstruction::{
    reconstruct, solve_and_reconstruct, Atom, Decomposition, DecompositionMode, PipelineResult, PiecewiseControl,
    ReconstructOptions, Reconstruction,
};

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
