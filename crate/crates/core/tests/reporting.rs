mod common;

use std::collections::BTreeMap;

use common::{noisy_copies, small_manifest};
use gradsel::dot_cache::build_cache_in_memory;
use gradsel::evaluation::{depth_profile, per_kind_means, read_sweep_csv};
use gradsel::manifest::ComponentKind;
use gradsel::selection::{single_component_sweep, Objective};
use gradsel::similarity::SimilarityParams;
use gradsel::Parallelism;

#[test]
fn kind_means_match_reaggregated_csv() {
    let fx =
        noisy_copies(small_manifest(3), 30, 5, &(0..22).map(|i| 0.3 + 0.1 * (i % 9) as f32).collect::<Vec<_>>(), 7);
    let cache = build_cache_in_memory(&fx.manifest, &fx.queries, &fx.cands, &fx.sets, Parallelism::Parallel).unwrap();
    let sweep = single_component_sweep(
        &fx.manifest,
        &cache,
        &fx.sets,
        SimilarityParams::default(),
        Objective::Accuracy,
        Parallelism::Parallel,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sweep.csv");
    sweep.write_csv(&path).unwrap();

    // independent re-aggregation straight from the CSV text
    let text = std::fs::read_to_string(&path).unwrap();
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let kind = cols[2].to_string();
        let e = sums.entry(kind).or_default();
        e.0 += cols[3].parse::<f64>().unwrap();
        e.1 += 1;
    }
    let means = per_kind_means(&sweep.values).unwrap();
    assert_eq!(means.len(), sums.len());
    for (kind, mean) in &means {
        let (s, n) = sums[kind.name()];
        assert!((mean - s / n as f64).abs() < 1e-12, "{kind:?}");
    }
    assert_eq!(sums["attn_q"].1, 3);
    assert_eq!(sums["embed"].1, 1);

    let back = read_sweep_csv(&path).unwrap();
    assert_eq!(back, sweep.values);

    let profile = depth_profile(&sweep.values);
    assert_eq!(profile.layers, vec![0, 1, 2]);
    for (kind, mean) in profile.kind_means() {
        assert!((mean - means[&kind]).abs() < 1e-12);
    }
    assert!(profile.get(1, ComponentKind::MlpUp).is_some());
}
