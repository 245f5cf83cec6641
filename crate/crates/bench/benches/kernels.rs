use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mfa_bench::{model, pi, sample, D};
use mfa_core::seed::{rng_for, sample_ball, Stream};
use mfa_core::{attention_gamma, wasserstein, EmpiricalMeasure, LossSpec, MeanFieldParams, OptConfig, Order, RMode, StepSchedule};

fn loss() -> LossSpec {
    LossSpec::GlobalQuadratic { target: vec![0.5, 0.0, 0.0, 0.0] }
}

fn gamma(c: &mut Criterion) {
    let mut rng = rng_for(0, Stream::Fuzz, &[]);
    let mu = EmpiricalMeasure::uniform(D, (0..16).flat_map(|_| sample_ball(&mut rng, D, 1.0)).collect()).unwrap();
    let z = sample_ball(&mut rng, D, 2.0);
    c.bench_function("attention_gamma_16_atoms", |b| b.iter(|| attention_gamma(black_box(&z), &mu, None).unwrap()));
}

fn forward_backward(c: &mut Criterion) {
    let mut g = c.benchmark_group("forward_backward");
    let s = sample(4, 1);
    for (l, h) in [(8, 4), (32, 16), (64, 64)] {
        let m = model(l, h, 1);
        g.bench_with_input(BenchmarkId::from_parameter(format!("L{l}_H{h}")), &m, |b, m| {
            b.iter(|| m.forward_backward(black_box(&s), &loss()).unwrap())
        });
    }
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let opt = OptConfig {
        beta1: 0.9,
        beta2: 0.9,
        eps: 1e-8,
        lambda: 0.5,
        eta: StepSchedule::Constant(0.05),
        mode: RMode::Blockwise,
    };
    let batch = vec![sample(4, 2), sample(4, 3)];
    let base = model(16, 16, 2);
    c.bench_function("train_step_L16_H16_B2", |b| {
        b.iter_batched(|| base.clone(), |mut m| m.train_step(&batch, &loss(), &opt).unwrap(), criterion::BatchSize::SmallInput)
    });
}

fn mean_field(c: &mut Criterion) {
    let mf = MeanFieldParams::from_pi(&pi(8, 3), 1024, 1.0).unwrap();
    let s = sample(4, 4);
    c.bench_function("mean_field_forward_backward_L1024", |b| {
        b.iter(|| mf.integrate_forward_backward(black_box(&s), &loss()).unwrap())
    });
}

fn transport(c: &mut Criterion) {
    let mut g = c.benchmark_group("wasserstein_w2");
    let mut rng = rng_for(5, Stream::Fuzz, &[]);
    for n in [8, 32, 64] {
        let mut cloud = |n: usize| EmpiricalMeasure::uniform(64, (0..n).flat_map(|_| sample_ball(&mut rng, 64, 1.0)).collect()).unwrap();
        let (a, b2) = (cloud(n), cloud(n));
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| b.iter(|| wasserstein(&a, &b2, Order::Two).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, gamma, forward_backward, train_step, mean_field, transport);
criterion_main!(benches);
