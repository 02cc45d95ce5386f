//! Retrieval-path cost: cached-index queries vs per-query recomputation of
//! every candidate embedding, and the index build itself.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use m3jepa_bench::fixture;
use m3jepa_core::eval::{build_index, retrieve, retrieve_full_recompute, RetrievalMode};
use m3jepa_core::synth::Split;

fn bench_retrieval(c: &mut Criterion) {
    let fx = fixture();
    let task = &fx.run.tasks[0];
    let index = build_index(&fx.ds, Split::Test, task).unwrap();
    let query = index.ids[0];

    c.bench_function("index_build_512", |b| {
        b.iter(|| black_box(build_index(&fx.ds, Split::Test, task).unwrap()))
    });

    let mut group = c.benchmark_group("query_512_candidates");
    group.bench_function("cached_index", |b| {
        b.iter(|| {
            black_box(
                retrieve(&fx.moe, &fx.ds, task, query, &index, RetrievalMode::Cosine).unwrap(),
            )
        })
    });
    group.bench_function("full_recompute", |b| {
        b.iter(|| {
            black_box(retrieve_full_recompute(&fx.moe, &fx.ds, task, query, &index).unwrap())
        })
    });
    group.bench_function("energy_ranking", |b| {
        b.iter(|| {
            black_box(
                retrieve(
                    &fx.moe,
                    &fx.ds,
                    task,
                    query,
                    &index,
                    RetrievalMode::Energy { alpha: 0.5 },
                )
                .unwrap(),
            )
        })
    });
    group.finish();
}

criterion_group!(benches, bench_retrieval);
criterion_main!(benches);
