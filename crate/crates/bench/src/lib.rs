//! Benchmark fixtures for the laxoc solvers.

use laxoc_core::scenarios::{example_a, example_b};
use laxoc_core::{build_phi1_program, build_phi2ti_program, ConvexProgram, Result, SolverOptions, TimeGrid};

pub fn solver_options() -> SolverOptions {
    SolverOptions { max_iter: 100_000, ..SolverOptions::default() }
}

/// Example A (seed 7) with `robots` robots on a grid of step `dt`.
pub fn example_a_program(robots: usize, dt: f64) -> Result<ConvexProgram> {
    let inst = example_a(robots, 7)?;
    build_phi1_program(&inst, &TimeGrid::uniform(inst.horizon, dt)?)
}

/// Example B (seed 7), terminal time free.
pub fn example_b_program(robots: usize, dt: f64) -> Result<ConvexProgram> {
    let inst = example_b(robots, 7)?;
    build_phi2ti_program(&inst, &TimeGrid::uniform(inst.horizon, dt)?)
}
