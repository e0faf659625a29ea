use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gradsel::candidates::CandidateSet;
use gradsel::dot_cache::build_cache_in_memory;
use gradsel::projection::{project_records, Distribution, ProjectionConfig};
use gradsel::selection::{greedy_select, Budget, Objective};
use gradsel::similarity::SimilarityParams;
use gradsel::toybench::{noise_gradients, MicroModelConfig};
use gradsel::{ComponentManifest, GradientRecord, Parallelism};

const MODES: [(&str, Parallelism); 2] = [("sequential", Parallelism::Sequential), ("parallel", Parallelism::Parallel)];

struct Fixture {
    manifest: ComponentManifest,
    queries: Vec<GradientRecord>,
    cands: Vec<GradientRecord>,
    sets: Vec<CandidateSet>,
}

/// Noise gradients on the default toy manifest, `n` queries with `b`
/// candidates each.
fn fixture(n: u64, b: u64) -> Fixture {
    let manifest = MicroModelConfig::default().manifest().unwrap();
    let queries = noise_gradients(&manifest, 0..n, 1, 1);
    let cands = noise_gradients(&manifest, 0..n, 1, 2);
    let sets = (0..n)
        .map(|i| CandidateSet {
            query_id: i,
            b: b as usize,
            members: (0..b).map(|j| (i + j * 7) % n).collect(),
            forced: false,
        })
        .collect();
    Fixture { manifest, queries, cands, sets }
}

fn dot_cache(c: &mut Criterion) {
    let fx = fixture(48, 5);
    let mut g = c.benchmark_group("dot_cache");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |bch| {
            bch.iter(|| build_cache_in_memory(&fx.manifest, &fx.queries, &fx.cands, black_box(&fx.sets), mode).unwrap())
        });
    }
    g.finish();
}

fn greedy(c: &mut Criterion) {
    let fx = fixture(200, 5);
    let cache = build_cache_in_memory(&fx.manifest, &fx.queries, &fx.cands, &fx.sets, Parallelism::Parallel).unwrap();
    let p = SimilarityParams::default();
    let mut g = c.benchmark_group("greedy_select");
    for objective in [Objective::Accuracy, Objective::Alignment] {
        for (name, mode) in MODES {
            g.bench_function(BenchmarkId::new(format!("{objective:?}"), name), |bch| {
                bch.iter(|| {
                    greedy_select(&fx.manifest, black_box(&cache), &fx.sets, p, objective, Budget::Components(15), mode)
                        .unwrap()
                })
            });
        }
    }
    g.finish();
}

fn projection(c: &mut Criterion) {
    let fx = fixture(8, 1);
    let dim = ProjectionConfig::dim_for_fraction(&fx.manifest, 0.01).unwrap();
    let cfg = ProjectionConfig::new(&fx.manifest, dim, 3, Distribution::Rademacher).unwrap();
    let mut g = c.benchmark_group("projection_1pct");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |bch| {
            bch.iter(|| project_records(black_box(&fx.queries), &cfg, mode).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, dot_cache, greedy, projection);
criterion_main!(benches);
