use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lpf_core::{
    build_world, ece, estimate_factor, estimate_factors, learned_aggregate, oracle_factor,
    spn_aggregate, AttentionAggregator, Entity, LabelDist, SoftFactor, Stream, World, WorldConfig,
};
use rand::Rng;

fn world(k_max: usize) -> World {
    build_world(WorldConfig {
        k_max,
        ..WorldConfig::default()
    })
    .unwrap()
}

fn factors_for(world: &World, k: usize) -> (Entity, Vec<SoftFactor>) {
    let e = world.sample_entity(k, 0).unwrap();
    let f = estimate_factors(&world.decoder(), &e.evidence, 16, &Stream::new(1)).unwrap();
    (e, f)
}

fn bench_factor(c: &mut Criterion) {
    let w = world(5);
    let dec = w.decoder();
    let item = w.sample_entity(1, 0).unwrap().evidence.remove(0);
    let mut g = c.benchmark_group("estimate_factor");
    for m in [16usize, 64, 256] {
        g.bench_with_input(BenchmarkId::from_parameter(m), &m, |b, &m| {
            let mut rng = Stream::new(2);
            b.iter(|| estimate_factor(&dec, black_box(&item), m, &mut rng).unwrap())
        });
    }
    g.finish();

    let w2 = build_world(WorldConfig {
        d: 2,
        ..WorldConfig::default()
    })
    .unwrap();
    let item2 = w2.sample_entity(1, 0).unwrap().evidence.remove(0);
    let dec2 = w2.decoder();
    c.bench_function("oracle_factor d=2 order=64", |b| {
        b.iter(|| oracle_factor(&dec2, black_box(&item2), 64).unwrap())
    });
}

fn bench_aggregate(c: &mut Criterion) {
    let w = world(20);
    let mut g = c.benchmark_group("spn_aggregate");
    for k in [5usize, 20] {
        let (_, f) = factors_for(&w, k);
        g.bench_with_input(BenchmarkId::from_parameter(k), &f, |b, f| {
            b.iter(|| spn_aggregate(black_box(f)).unwrap())
        });
    }
    g.finish();

    let agg = AttentionAggregator::new(w.decoder(), 16, 1e-4, &mut Stream::new(3));
    let (e, _) = factors_for(&w, 10);
    c.bench_function("learned_aggregate k=10", |b| {
        b.iter(|| learned_aggregate(&agg, black_box(&e.evidence)).unwrap())
    });
    let batch: Vec<Entity> = (0..32).map(|j| w.sample_entity(5, j).unwrap()).collect();
    c.bench_function("attention objective_and_grad batch=32", |b| {
        b.iter(|| agg.objective_and_grad(black_box(&batch)))
    });
}

fn bench_ece(c: &mut Criterion) {
    let mut rng = Stream::new(4);
    let preds: Vec<LabelDist> = (0..10_000)
        .map(|_| {
            let raw: Vec<f64> = (0..3).map(|_| rng.random_range(0.01..1.0)).collect();
            lpf_core::normalize(&raw).unwrap()
        })
        .collect();
    let labels: Vec<usize> = (0..preds.len()).map(|i| i % 3).collect();
    c.bench_function("ece n=10000", |b| {
        b.iter(|| ece(black_box(&preds), &labels, 10).unwrap())
    });
}

criterion_group!(benches, bench_factor, bench_aggregate, bench_ece);
criterion_main!(benches);
