use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use lstdq_core::estimators::{empirical_moments, population_moments};
use lstdq_core::features::realizable_random_features;
use lstdq_core::generators::{random_dist, random_mdp, random_policy};
use lstdq_core::sampling::sample_dataset;
use lstdq_core::NextFeatureMode;

fn bench_sampling_and_moments(c: &mut Criterion) {
    let mdp = random_mdp(20, 4, 0.9, 1);
    let pi = random_policy(20, 4, 2);
    let mu_d = random_dist(mdp.num_pairs(), 3);
    let fmap = realizable_random_features(&mdp, &pi, 12, 4, 1.0).unwrap();

    let mut group = c.benchmark_group("dataset");
    for n in [1_000usize, 10_000, 100_000] {
        group.throughput(Throughput::Elements(n as u64));
        group.bench_with_input(BenchmarkId::new("sample", n), &n, |b, &n| {
            b.iter(|| sample_dataset(&mdp, &pi, &mu_d, n, 9).unwrap())
        });
        let data = sample_dataset(&mdp, &pi, &mu_d, n, 9).unwrap();
        group.bench_with_input(BenchmarkId::new("empirical_moments", n), &data, |b, data| {
            b.iter(|| empirical_moments(data, &fmap, &mdp, &pi, NextFeatureMode::Sampled).unwrap())
        });
    }
    group.finish();

    c.bench_function("population_moments/80_pairs", |b| {
        b.iter(|| population_moments(&mdp, &pi, &mu_d, &fmap).unwrap())
    });
}

criterion_group!(benches, bench_sampling_and_moments);
criterion_main!(benches);
