use criterion::{criterion_group, criterion_main, Criterion};
use lstdq_core::coverage::{burn_in_estimate, coverage_report, cvrg_population, ReportInputs};
use lstdq_core::estimators::population_moments;
use lstdq_core::features::tabular_features;
use lstdq_core::generators::{random_dist, random_mdp, random_policy};

fn bench_coverage(c: &mut Criterion) {
    let mdp = random_mdp(15, 3, 0.9, 21);
    let pi = random_policy(15, 3, 22);
    let mu_d = random_dist(mdp.num_pairs(), 23);
    let fmap = tabular_features(&mdp);
    let m = population_moments(&mdp, &pi, &mu_d, &fmap).unwrap();

    c.bench_function("cvrg_population/tabular45", |b| b.iter(|| cvrg_population(&m)));
    c.bench_function("burn_in_estimate/tabular45", |b| b.iter(|| burn_in_estimate(&m, &fmap, 0.05).unwrap()));

    let inputs = ReportInputs {
        mdp: &mdp,
        pi: &pi,
        mu_d: &mu_d,
        fmap: &fmap,
        empirical: None,
        abstraction: None,
        delta: 0.05,
    };
    c.bench_function("coverage_report/tabular45", |b| b.iter(|| coverage_report(&inputs).unwrap()));
}

criterion_group!(benches, bench_coverage);
criterion_main!(benches);
