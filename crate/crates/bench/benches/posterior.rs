use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hierts_bench::Workload;
use hierts_core::posterior::{decomposed_marginal_posterior, hyper_posterior, joint_posterior_oracle};
use hierts_core::SufficientStats;

fn hyper(c: &mut Criterion) {
    let mut group = c.benchmark_group("hyper_posterior");
    for latents in [1, 5, 10] {
        let work = Workload::preset(20, latents, 2, 200, 0);
        let stats = SufficientStats::from_history(20, 2, &work.history, work.spec.sigma()).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(latents), &stats, |b, stats| {
            b.iter(|| hyper_posterior(&work.spec, stats).unwrap());
        });
    }
    group.finish();
}

fn marginal_vs_oracle(c: &mut Criterion) {
    let work = Workload::preset(5, 3, 2, 100, 0);
    let stats = SufficientStats::from_history(5, 2, &work.history, work.spec.sigma()).unwrap();
    let mut group = c.benchmark_group("marginal");
    group.bench_function("decomposed", |b| {
        b.iter(|| decomposed_marginal_posterior(&work.spec, &stats).unwrap());
    });
    group.bench_function("joint_oracle", |b| {
        b.iter(|| joint_posterior_oracle(&work.spec, &work.history).unwrap());
    });
    group.finish();
}

criterion_group!(benches, hyper, marginal_vs_oracle);
criterion_main!(benches);
