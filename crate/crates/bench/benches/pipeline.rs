use criterion::{criterion_group, criterion_main, Criterion};
use hierts_core::data::{factorize, kmeans, planted_embeddings, ratings_from_embeddings, AlsOptions, RatingsDataset};

fn als(c: &mut Criterion) {
    let (users, items) = planted_embeddings(200, 100, 5, 5, 4.0, 1.0, 3);
    let ds = RatingsDataset::from_triples(ratings_from_embeddings(&users, &items, 0.1, 3));
    let opts = AlsOptions {
        rank: 5,
        sweeps: 5,
        ..AlsOptions::default()
    };
    c.bench_function("als_200x100_rank5_5_sweeps", |b| b.iter(|| factorize(&ds, &opts).unwrap()));
}

fn clustering(c: &mut Criterion) {
    let (_, items) = planted_embeddings(1, 1000, 5, 5, 4.0, 1.0, 4);
    c.bench_function("kmeans_1000x5_k5", |b| b.iter(|| kmeans(&items, 5, 4, 100, 1e-8).unwrap()));
}

criterion_group!(benches, als, clustering);
criterion_main!(benches);
