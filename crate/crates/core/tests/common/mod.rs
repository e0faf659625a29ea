#![allow(dead_code)]

use std::collections::BTreeMap;

use gradsel::candidates::CandidateSet;
use gradsel::dot_cache::{DotCache, PairKey};
use gradsel::manifest::ComponentKind;
use gradsel::{ComponentId, ComponentManifest, GradientRecord};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small manifest: an embedding plus `layers` full layers with a spread of
/// block sizes.
pub fn small_manifest(layers: u32) -> ComponentManifest {
    let mut comps = vec![(ComponentId::embedding(), vec![6, 4])];
    for l in 0..layers {
        for (i, kind) in ComponentKind::LAYER_KINDS.iter().enumerate() {
            comps.push((ComponentId::layer(l, *kind), vec![2 + i % 3, 3 + l as usize]));
        }
    }
    ComponentManifest::new("fixture", comps).unwrap()
}

/// Manifest with `k` components of the given sizes (layer kinds cycled).
pub fn manifest_with_sizes(sizes: &[usize]) -> ComponentManifest {
    let comps = sizes
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let id = if i == 0 {
                ComponentId::embedding()
            } else {
                ComponentId::layer(((i - 1) / 7) as u32, ComponentKind::LAYER_KINDS[(i - 1) % 7])
            };
            (id, vec![n])
        })
        .collect();
    ComponentManifest::new("fixture", comps).unwrap()
}

pub fn random_record(manifest: &ComponentManifest, id: u64, rng: &mut impl Rng) -> GradientRecord {
    let blocks = manifest
        .components
        .iter()
        .map(|e| (0..e.param_count).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect();
    GradientRecord::new(id, blocks)
}

pub struct Fixture {
    pub manifest: ComponentManifest,
    pub queries: Vec<GradientRecord>,
    pub cands: Vec<GradientRecord>,
    pub sets: Vec<CandidateSet>,
}

/// `n` candidates and `n` queries; query i is candidate i plus noise of
/// relative size `noise[c]` on component c (1.0 or more means essentially
/// unrelated). Each query's set is {i} plus `b-1` random distractors.
pub fn noisy_copies(manifest: ComponentManifest, n: usize, b: usize, noise: &[f32], seed: u64) -> Fixture {
    assert_eq!(noise.len(), manifest.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cands: Vec<GradientRecord> = (0..n as u64).map(|i| random_record(&manifest, i, &mut rng)).collect();
    let queries = cands
        .iter()
        .map(|c| {
            let fresh = random_record(&manifest, c.sample_id, &mut rng);
            let blocks = c
                .blocks
                .iter()
                .zip(&fresh.blocks)
                .zip(noise)
                .map(|((cb, fb), &s)| {
                    let keep = if s >= 1.0 { 0.0 } else { 1.0 };
                    cb.iter().zip(fb).map(|(x, y)| keep * x + s * y).collect()
                })
                .collect();
            GradientRecord::new(c.sample_id, blocks)
        })
        .collect();
    let sets = random_sets(n, b, &mut rng);
    Fixture { manifest, queries, cands, sets }
}

/// Candidate sets over ids `0..n`: the query's own id first, then `b-1`
/// distinct distractors.
pub fn random_sets(n: usize, b: usize, rng: &mut impl Rng) -> Vec<CandidateSet> {
    (0..n as u64)
        .map(|i| {
            let mut members = vec![i];
            for j in index::sample(rng, n - 1, b - 1) {
                let j = j as u64;
                members.push(if j >= i { j + 1 } else { j });
            }
            CandidateSet { query_id: i, b, members, forced: false }
        })
        .collect()
}

/// Cache assembled directly from δ rows. Every self-product is 1 on every
/// component, so the cosine of subset S is `sum_S(delta) / |S|`.
pub fn unit_norm_cache(manifest: &ComponentManifest, rows: Vec<(u64, u64, Vec<f64>)>) -> (DotCache, Vec<CandidateSet>) {
    let k = manifest.len();
    let mut entries = BTreeMap::new();
    let mut query_self = BTreeMap::new();
    let mut cand_self = BTreeMap::new();
    for (q, c, row) in rows {
        assert_eq!(row.len(), k);
        entries.insert(PairKey::new(q, c), row);
        query_self.insert(q, vec![1.0; k]);
        cand_self.insert(c, vec![1.0; k]);
    }
    let cache = DotCache::from_parts(manifest.hash(), k, entries, query_self, cand_self).unwrap();
    let mut sets = cache.candidate_sets();
    // the fixture always uses the query id as the original
    for s in &mut sets {
        let pos = s.members.iter().position(|&m| m == s.query_id).unwrap();
        s.members.swap(0, pos);
    }
    (cache, sets)
}

/// Direct cosine on concatenated blocks, f64 throughout.
pub fn direct_cosine(a: &GradientRecord, b: &GradientRecord, subset: &[usize], eps: f64) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for &k in subset {
        for (&x, &y) in a.blocks[k].iter().zip(&b.blocks[k]) {
            let (x, y) = (x as f64, y as f64);
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
    }
    dot / (na.sqrt() * nb.sqrt() + eps)
}
