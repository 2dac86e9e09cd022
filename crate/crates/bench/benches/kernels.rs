use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use meanfield_core::{
    discrete_linf, epsilon_scale, field_all, field_exact, lattice_cover, min_phase_separation, quiet_start_init, solve,
    verlet_step, ForceKernel, GridDensity, GridSpec, InitialDensitySpec, ParticleEnsemble, PhaseParallelepiped,
};

fn ensemble(n: usize, d: usize) -> ParticleEnsemble {
    let spec = InitialDensitySpec::uniform_box(1.0, 1.0).with_jitter(0.1);
    quiet_start_init(&spec, n, d, 7).unwrap().ensemble
}

fn fields(c: &mut Criterion) {
    let kernel = ForceKernel::repulsive(0.5).unwrap();
    let mut g = c.benchmark_group("field");
    for (n, d) in [(1024, 1), (4096, 1), (1296, 2), (4096, 2)] {
        let ens = ensemble(n, d);
        g.bench_with_input(
            BenchmarkId::new("exact_one", format!("d{d}/N{}", ens.n())),
            &ens,
            |b, ens| b.iter(|| field_exact(black_box(ens), 0, &kernel).unwrap()),
        );
        g.bench_with_input(BenchmarkId::new("all", format!("d{d}/N{}", ens.n())), &ens, |b, ens| {
            b.iter(|| field_all(black_box(ens), &kernel).unwrap())
        });
    }
    let ens = ensemble(1296, 2);
    let dt = epsilon_scale(1.0, ens.n(), 2).unwrap() / 8.0;
    g.bench_function("verlet_step/d2/N1296", |b| {
        b.iter(|| verlet_step(black_box(&ens), dt, &kernel).unwrap())
    });
    g.finish();
}

fn diagnostics(c: &mut Criterion) {
    let mut g = c.benchmark_group("diagnostics");
    for (n, d) in [(4096, 1), (4096, 2)] {
        let ens = ensemble(n, d);
        let eps = epsilon_scale(1.0, ens.n(), d).unwrap();
        g.bench_with_input(
            BenchmarkId::new("min_phase_separation", format!("d{d}/N{}", ens.n())),
            &ens,
            |b, ens| b.iter(|| min_phase_separation(black_box(ens), eps).unwrap()),
        );
        g.bench_with_input(
            BenchmarkId::new("discrete_linf", format!("d{d}/N{}", ens.n())),
            &ens,
            |b, ens| b.iter(|| discrete_linf(black_box(ens), eps).unwrap()),
        );
    }
    g.finish();
}

fn covering(c: &mut Criterion) {
    let mut g = c.benchmark_group("lattice_cover");
    for (d, cells) in [(1, 8.0), (2, 4.0)] {
        let eps = 0.05;
        let s = PhaseParallelepiped::ball(&vec![0.1; d], &vec![-0.1; d], cells * eps).unwrap();
        g.bench_with_input(
            BenchmarkId::from_parameter(format!("d{d}/eta{cells}eps")),
            &s,
            |b, s| b.iter(|| lattice_cover(black_box(s), eps).unwrap()),
        );
    }
    g.finish();
}

fn oracle(c: &mut Criterion) {
    let kernel = ForceKernel::repulsive(0.5).unwrap();
    let grid = GridSpec::new(256, 256, 2.5, 2.5).unwrap();
    let spec = InitialDensitySpec::uniform_box(1.0, 1.0);
    let f0 = GridDensity::from_spec(&spec, grid).unwrap();
    c.bench_function("oracle/solve_8_steps/256x256", |b| {
        b.iter(|| solve(black_box(&f0), 0.25, 1.0 / 32.0, &kernel, 8).unwrap())
    });
}

criterion_group!(benches, fields, diagnostics, covering, oracle);
criterion_main!(benches);
