use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nslk_core::{
    conditional_simulate, krige, log_likelihood, BasisSpec, Bounds, CovParams, FittedModel, LatticeGrid,
    ObservationSet, Point, Targets,
};

fn setup(n_lattice: usize, n_obs: usize) -> (LatticeGrid, ObservationSet, CovParams) {
    let grid = LatticeGrid::build(Bounds::new(0.0, 1.0, 0.0, 1.0), n_lattice, n_lattice, 0).unwrap();
    let locations: Vec<Point> = (0..n_obs)
        .map(|i| {
            let t = i as f64;
            Point {
                x: (t * 0.618_033_988_7).fract(),
                y: (t * 0.754_877_666_2).fract(),
            }
        })
        .collect();
    let values = locations.iter().map(|p| (4.0 * p.x).sin() + (3.0 * p.y).cos()).collect();
    let obs = ObservationSet::residuals("bench", locations, values).unwrap();
    let cov = CovParams::stationary(grid.len(), 0.5, 1.0, 0.05).unwrap();
    (grid, obs, cov)
}

fn bench_likelihood(c: &mut Criterion) {
    let mut group = c.benchmark_group("log_likelihood");
    group.sample_size(10);
    for (n, obs) in [(32, 200), (64, 500), (128, 500)] {
        let (grid, data, cov) = setup(n, obs);
        group.bench_with_input(BenchmarkId::new(format!("obs{obs}"), n), &n, |b, _| {
            b.iter(|| log_likelihood(black_box(&data), &cov, &grid, &BasisSpec::default()).unwrap())
        });
    }
    group.finish();
}

fn bench_kriging(c: &mut Criterion) {
    let mut group = c.benchmark_group("kriging");
    group.sample_size(10);
    let (grid, data, cov) = setup(64, 500);
    let targets: Vec<Point> = (0..64 * 64)
        .map(|i| Point {
            x: ((i % 64) as f64 + 0.5) / 64.0,
            y: ((i / 64) as f64 + 0.5) / 64.0,
        })
        .collect();
    let targets = Targets::points(targets);
    group.bench_function("krige_64_se", |b| {
        b.iter(|| krige(black_box(&data), &cov, &grid, &BasisSpec::default(), &targets).unwrap())
    });
    let model = FittedModel::fit(&data, cov.clone(), &grid, &BasisSpec::default()).unwrap();
    group.bench_function("conditional_64_draws100", |b| {
        b.iter(|| conditional_simulate(black_box(&model), &targets, 100, 3).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_likelihood, bench_kriging);
criterion_main!(benches);
