use criterion::{criterion_group, criterion_main, Criterion};
use laxoc_bench::{example_a_program, example_b_program, solver_options};
use laxoc_core::hj_oracle::solve_hj;
use laxoc_core::scenarios::toy_minmax;
use laxoc_core::{reconstruct, solve, HjGrids, HjKind, ReconstructOptions};

fn transcription(c: &mut Criterion) {
    c.bench_function("build_phi1/example_a_r3_dt0.1", |b| b.iter(|| example_a_program(3, 0.1).unwrap()));
}

fn solver(c: &mut Criterion) {
    let mut g = c.benchmark_group("solve");
    g.sample_size(10);
    let a = example_a_program(1, 0.2).unwrap();
    g.bench_function("example_a_r1_dt0.2", |b| b.iter(|| solve(&a, &solver_options()).unwrap()));
    let bp = example_b_program(1, 0.1).unwrap();
    g.bench_function("example_b_r1_dt0.1", |b| b.iter(|| solve(&bp, &solver_options()).unwrap()));
    g.finish();
}

fn reconstruction(c: &mut Criterion) {
    let p = example_a_program(1, 0.2).unwrap();
    let sol = solve(&p, &solver_options()).unwrap();
    let opts = ReconstructOptions::default();
    c.bench_function("reconstruct/example_a_r1_dt0.2", |b| b.iter(|| reconstruct(&p, &sol, &opts).unwrap()));
}

fn oracle(c: &mut Criterion) {
    let mut g = c.benchmark_group("hj_oracle");
    g.sample_size(10);
    let inst = toy_minmax(0.0).unwrap();
    for dx in [0.05, 0.02] {
        let grids = HjGrids::new(vec![-2.5], vec![2.5], vec![dx], dx);
        g.bench_function(format!("toy_minmax_v1_dx{dx}"), |b| b.iter(|| solve_hj(&inst, HjKind::V1, &grids).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, transcription, solver, reconstruction, oracle);
criterion_main!(benches);
