use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::DMatrix;
use swarmfield::filters::{measurement_update, propagate_covariance, riccati_step};
use swarmfield::grid::gradient;
use swarmfield::kde::kde_measurements;
use swarmfield::pde::{assemble_fp_operator, step_density, GradientOperator, IntegrationOperator};
use swarmfield::swarm::init_swarm;
use swarmfield::{Grid, NoiseModel, Rect, ScalarField, VectorField};

fn setup() -> (Grid, VectorField) {
    let g = Grid::unit_square(30).unwrap();
    let v = VectorField::from_fn(&g, |x, y| (0.01 * (3.0 * x).sin(), 0.01 * (2.0 * y).cos()));
    (g, v)
}

fn pde(c: &mut Criterion) {
    let (g, v) = setup();
    let a = assemble_fp_operator(&v, 5e-5, &g).unwrap();
    let p = ScalarField::from_fn(&g, |x, y| 1.0 + 0.3 * x * y);
    c.bench_function("assemble_fp_30x30", |b| b.iter(|| assemble_fp_operator(black_box(&v), 5e-5, &g).unwrap()));
    c.bench_function("step_density_30x30", |b| b.iter(|| step_density(black_box(&p), &a, 0.01).unwrap()));

    let integrator = IntegrationOperator::new(&g).unwrap();
    let q = gradient(&p);
    c.bench_function("integrate_30x30", |b| b.iter(|| integrator.integrate(black_box(&q), 1.0).unwrap()));
}

fn kde(c: &mut Criterion) {
    let g = Grid::unit_square(30).unwrap();
    let region = Rect::new(0.15, 0.85, 0.15, 0.85).unwrap();
    let swarm = init_swarm(1024, &region, g.domain(), 7).unwrap();
    c.bench_function("kde_1024_agents", |b| b.iter(|| kde_measurements(black_box(swarm.positions()), 0.04, &g).unwrap()));
}

fn riccati(c: &mut Criterion) {
    let (g, v) = setup();
    let a = assemble_fp_operator(&v, 5e-5, &g).unwrap();
    let n = g.len();
    let p = DMatrix::<f64>::identity(n, n) * 1e-3;
    let r = NoiseModel::constant(n, 1e-4).unwrap();
    let mut group = c.benchmark_group("riccati");
    group.sample_size(10);
    group.bench_function("density_step_900", |b| b.iter(|| riccati_step(black_box(&p), &a, &r, 1e-8, 0.2).unwrap()));
    group.bench_function("measurement_update_900", |b| b.iter(|| measurement_update(black_box(&p), &r, 0.2).unwrap()));

    let ag = GradientOperator::new(a, Arc::new(IntegrationOperator::new(&g).unwrap()), 1.0);
    let pg = DMatrix::<f64>::identity(2 * n, 2 * n) * 1e-3;
    let rg = NoiseModel::constant(2 * n, 1e-4).unwrap();
    group.bench_function("gradient_propagate_1800", |b| b.iter(|| propagate_covariance(black_box(&pg), &ag, 1e-8, 0.1)));
    group.bench_function("measurement_update_1800", |b| b.iter(|| measurement_update(black_box(&pg), &rg, 0.2).unwrap()));
    group.finish();
}

criterion_group!(benches, pde, kde, riccati);
criterion_main!(benches);
