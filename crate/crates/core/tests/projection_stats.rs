mod common;

use common::{manifest_with_sizes, random_record};
use gradsel::candidates::CandidateSet;
use gradsel::dot_cache::build_cache_in_memory;
use gradsel::projection::{
    matrix_entry, project_file, project_record, project_records, projected_score_table, Distribution, ProjectedSet,
    ProjectionConfig,
};
use gradsel::similarity::{score_table, SimilarityParams, Subset};
use gradsel::store::write_gradient_file;
use gradsel::toybench::{
    extract_gradients, generate_corpus, train_micro_model, MicroModelConfig, ToyVocab, TrainConfig,
};
use gradsel::{GradientRecord, Parallelism};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Over 100 seeds at 1024 rows per block, the mean projected block dot
/// stays within three standard errors of the true block dot.
fn check_unbiased(dist: Distribution) {
    let m = manifest_with_sizes(&[300, 300]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_record(&m, 0, &mut rng);
    let noise = random_record(&m, 1, &mut rng);
    // correlated pair so the true dots are far from zero
    let b = GradientRecord::new(
        1,
        a.blocks.iter().zip(&noise.blocks).map(|(x, n)| x.iter().zip(n).map(|(p, q)| p + 0.5 * q).collect()).collect(),
    );
    let mut est = vec![Vec::new(); 2];
    for seed in 0..100 {
        let cfg = ProjectionConfig::new(&m, 2048, seed, dist).unwrap();
        assert_eq!(cfg.per_component_dims, vec![1024, 1024]);
        let pa = project_record(&a, &cfg, Parallelism::Parallel).unwrap();
        let pb = project_record(&b, &cfg, Parallelism::Parallel).unwrap();
        for (k, off) in cfg.offsets().into_iter().enumerate() {
            let r = off..off + 1024;
            est[k].push(dot(&pa.vector[r.clone()], &pb.vector[r]));
        }
    }
    for (k, est) in est.iter().enumerate() {
        let truth = dot(&a.blocks[k], &b.blocks[k]);
        let n = est.len() as f64;
        let mean = est.iter().sum::<f64>() / n;
        let var = est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt();
        assert!((mean - truth).abs() < 3.0 * se, "{dist:?} block {k}: mean {mean} truth {truth} se {se}");
    }
}

#[test]
fn rademacher_blocks_are_unbiased() {
    check_unbiased(Distribution::Rademacher);
}

#[test]
fn gaussian_blocks_are_unbiased() {
    check_unbiased(Distribution::Gaussian);
}

#[test]
fn same_seed_is_bit_identical_and_files_match() {
    let m = manifest_with_sizes(&[100, 70, 200]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let recs: Vec<GradientRecord> = (0..7).map(|i| random_record(&m, i, &mut rng)).collect();
    let cfg = ProjectionConfig::new(&m, 37, 42, Distribution::Rademacher).unwrap();
    let a = project_records(&recs, &cfg, Parallelism::Parallel).unwrap();
    let b = project_records(&recs, &cfg, Parallelism::Sequential).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(
            x.vector.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            y.vector.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
    let other = ProjectionConfig::new(&m, 37, 43, Distribution::Rademacher).unwrap();
    assert_ne!(project_records(&recs, &other, Parallelism::Sequential).unwrap(), a);

    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("g.gsg");
    write_gradient_file(&input, &m, &recs).unwrap();
    let (o1, o2) = (dir.path().join("p1.gsp"), dir.path().join("p2.gsp"));
    project_file(&input, &o1, &cfg, 3, Parallelism::Parallel).unwrap();
    project_file(&input, &o2, &cfg, 5, Parallelism::Sequential).unwrap();
    assert_eq!(std::fs::read(&o1).unwrap(), std::fs::read(&o2).unwrap());
    let loaded = ProjectedSet::load(&o1).unwrap();
    assert_eq!(loaded.records, a);
    assert_eq!(loaded.config, cfg);
}

#[test]
fn projection_is_linear() {
    let m = manifest_with_sizes(&[120, 64]);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random_record(&m, 0, &mut rng);
    let b = random_record(&m, 1, &mut rng);
    // doubling is exact in f32, so the combined input carries no rounding
    let c = GradientRecord::new(
        2,
        a.blocks.iter().zip(&b.blocks).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + 2.0 * q).collect()).collect(),
    );
    let cfg = ProjectionConfig::new(&m, 40, 9, Distribution::Gaussian).unwrap();
    let pa = project_record(&a, &cfg, Parallelism::Sequential).unwrap().vector;
    let pb = project_record(&b, &cfg, Parallelism::Sequential).unwrap().vector;
    let pc = project_record(&c, &cfg, Parallelism::Sequential).unwrap().vector;
    for i in 0..pc.len() {
        let want = pa[i] as f64 + 2.0 * pb[i] as f64;
        assert!((pc[i] as f64 - want).abs() < 1e-4 * (1.0 + want.abs()), "row {i}");
    }
}

#[test]
fn projected_row_matches_explicit_matrix() {
    let m = manifest_with_sizes(&[150, 20]);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = random_record(&m, 0, &mut rng);
    for dist in [Distribution::Rademacher, Distribution::Gaussian] {
        let cfg = ProjectionConfig::new(&m, 9, 77, dist).unwrap();
        let p = project_record(&a, &cfg, Parallelism::Sequential).unwrap();
        for (k, off) in cfg.offsets().into_iter().enumerate() {
            let d = cfg.per_component_dims[k];
            for row in 0..d {
                let direct: f64 = a.blocks[k]
                    .iter()
                    .enumerate()
                    .map(|(col, &v)| matrix_entry(77, dist, k, row, col) * v as f64)
                    .sum::<f64>()
                    / (d as f64).sqrt();
                assert!((p.vector[off + row] as f64 - direct).abs() < 1e-5 * (1.0 + direct.abs()));
            }
        }
    }
}

#[test]
fn orthogonal_vectors_stay_nearly_orthogonal() {
    // disjoint supports make the pair exactly orthogonal
    let n = 8192;
    let m = manifest_with_sizes(&[n]);
    let a = GradientRecord::new(0, vec![(0..n).map(|i| if i < n / 2 { 1.0 + (i % 7) as f32 } else { 0.0 }).collect()]);
    let b = GradientRecord::new(1, vec![(0..n).map(|i| if i >= n / 2 { 1.0 + (i % 5) as f32 } else { 0.0 }).collect()]);
    assert_eq!(dot(&a.blocks[0], &b.blocks[0]), 0.0);
    for seed in 0..3 {
        let cfg = ProjectionConfig::new(&m, 4096, seed, Distribution::Rademacher).unwrap();
        let pa = project_record(&a, &cfg, Parallelism::Parallel).unwrap().vector;
        let pb = project_record(&b, &cfg, Parallelism::Parallel).unwrap().vector;
        let cos = dot(&pa, &pb) / (dot(&pa, &pa).sqrt() * dot(&pb, &pb).sqrt());
        assert!(cos.abs() < 0.1, "seed {seed}: {cos}");
    }
}

/// With as many rows as parameters, projected cosines of real model
/// gradients track the exact cosines. An iid projection keeps a per-pair
/// standard deviation of about 1/sqrt(d), so the bound is on the mean
/// deviation plus a five-sigma cap per pair.
#[test]
fn full_dimension_projection_tracks_true_cosine() {
    let cfg = MicroModelConfig { seed: 3, ..MicroModelConfig::default() };
    let vocab = ToyVocab::new(256).unwrap();
    let samples = generate_corpus(&vocab, 3, 40);
    let params = train_micro_model(&cfg, &samples, &TrainConfig { steps: 20, ..TrainConfig::default() }).unwrap();
    let m = cfg.manifest().unwrap();
    let recs = extract_gradients(&params, &samples[..20], Parallelism::Parallel).unwrap();
    let sets: Vec<CandidateSet> =
        (0..10u64).map(|i| CandidateSet { query_id: i, b: 10, members: (10..20).collect(), forced: false }).collect();
    let cache = build_cache_in_memory(&m, &recs, &recs, &sets, Parallelism::Parallel).unwrap();
    let eps = SimilarityParams::default();
    let exact = score_table(&cache, &sets, &Subset::all(m.len()), eps, Parallelism::Parallel).unwrap();

    let d = m.total_params;
    let pcfg = ProjectionConfig::new(&m, d, 11, Distribution::Rademacher).unwrap();
    let projected = ProjectedSet {
        manifest: m.clone(),
        records: project_records(&recs, &pcfg, Parallelism::Parallel).unwrap(),
        config: pcfg,
    };
    let approx = projected_score_table(&projected, &projected, &sets, eps, Parallelism::Parallel).unwrap();
    let errs: Vec<f64> = exact.scores.iter().map(|(k, v)| (approx.scores[k] - v).abs()).collect();
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    assert!(mean < 0.01, "mean deviation {mean}");
    assert!(worst < 5.0 / (d as f64).sqrt(), "worst deviation {worst} at d = {d}");
}
