use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use tapwb_bench::co_problem;
use tapwb_core::sensitivity::{adjoint_gradient, fd_gradient};
use tapwb_core::{presets, Scheme, SolverConfig};

fn forward(c: &mut Criterion) {
    let mut g = c.benchmark_group("forward");
    g.sample_size(20);
    for (name, scheme) in [("semi", Scheme::SemiImplicit), ("implicit", Scheme::Implicit)] {
        let p = co_problem(scheme).unwrap();
        let k = p.model.base_rate_constants().unwrap();
        g.bench_function(name, |b| b.iter(|| p.model.flux_history(&k).unwrap()));
    }
    g.finish();
}

fn gradients(c: &mut Criterion) {
    let p = co_problem(Scheme::SemiImplicit).unwrap();
    let x = p.params.values();
    let mut g = c.benchmark_group("gradient");
    g.sample_size(10);
    g.bench_function("adjoint", |b| b.iter(|| adjoint_gradient(&p.model, &p.params, &x, &p.objective).unwrap()));
    g.bench_function("fd", |b| b.iter(|| fd_gradient(&p.model, &p.params, &x, &p.objective, 1.0 / 5000.0).unwrap()));
    g.finish();
}

fn mesh(c: &mut Criterion) {
    let reactor = tapwb_core::reactor::ReactorSpec {
        zone_lengths: [2.94, 0.12, 2.94],
        ..presets::uniform_reactor(6.0, 0.4, 13.5, 40.0, 0.02)
    };
    let config = SolverConfig { total_time: 3.0, n_steps: 2000, ..SolverConfig::default() };
    let mut g = c.benchmark_group("inert_mesh");
    g.sample_size(10);
    for (base, density) in [(200, 4), (2500, 0)] {
        let m = presets::inert_model(reactor.clone(), base, density, 1.0, config.clone()).unwrap();
        let k = m.base_rate_constants().unwrap();
        g.bench_with_input(BenchmarkId::new("cells", m.mesh().n_cells()), &m, |b, m| b.iter(|| m.flux_history(&k).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, forward, gradients, mesh);
criterion_main!(benches);
