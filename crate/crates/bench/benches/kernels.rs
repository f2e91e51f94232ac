use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use svv_core::malliavin::{first_field, second_entries};
use svv_core::sandwich::simulate_path;
use svv_core::{BoundFunctions, KernelSpec, ModelSpec, SandwichDrift, SandwichModel};

fn model(steps: usize) -> SandwichModel {
    SandwichModel::new(ModelSpec {
        kernel: KernelSpec::single_power(0.3, 0.3).unwrap(),
        bounds: BoundFunctions::constant(0.05, 1.0),
        drift: SandwichDrift::symmetric(0.01, 3.0),
        y0: 0.525,
        x0: 0.0,
        r: 0.0,
        rho: -0.7,
        horizon: 1.0,
        steps,
    })
    .unwrap()
}

fn path_simulation(c: &mut Criterion) {
    let mut g = c.benchmark_group("simulate_path");
    for n in [256, 1024] {
        let m = model(n);
        let mut k = 0u64;
        g.bench_with_input(BenchmarkId::from_parameter(n), &m, |b, m| {
            b.iter(|| {
                k += 1;
                simulate_path(black_box(m), 1, k).unwrap()
            })
        });
    }
    g.finish();
}

fn malliavin_fields(c: &mut Criterion) {
    let mut g = c.benchmark_group("first_field");
    for n in [256, 1024] {
        let m = model(n);
        let p = simulate_path(&m, 1, 0).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(n), &p, |b, p| {
            b.iter(|| first_field(black_box(p), &m).unwrap())
        });
    }
    g.finish();

    let m = model(1024);
    let p = simulate_path(&m, 1, 0).unwrap();
    let f = first_field(&p, &m).unwrap();
    let triples: Vec<_> = (0..64).map(|k| (k, 2 * k + 1, 1024)).collect();
    c.bench_function("second_entries/64x1024", |b| b.iter(|| second_entries(&p, &m, &f, black_box(&triples)).unwrap()));
}

criterion_group!(benches, path_simulation, malliavin_fields);
criterion_main!(benches);
