//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails. Every oracle here is computed
//! independently of the code path under test (direct full-vector cosines,
//! a separate BM25 scorer, brute-force sample statistics).

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use gradsel::candidates::{build_candidate_sets, Bm25Params, CandidateSet, CorpusRole};
use gradsel::dot_cache::{build_cache, BuildOptions, DotCache};
use gradsel::manifest::ComponentKind;
use gradsel::projection::{project_record, Distribution, ProjectionConfig};
use gradsel::selection::{evaluate_subset, greedy_select, single_component_sweep, Budget, Objective, SelectionTrace};
use gradsel::similarity::{reconstruct_cosine, SimilarityParams, Subset};
use gradsel::store::write_gradient_file;
use gradsel::toybench::{
    self, extract_gradients, finite_difference_check, generate_corpus, perturb_sample, run_benchmark,
    train_micro_model, BenchConfig, GradientSource, MicroModelConfig, Params, PerturbMode, Setting, ToySample,
    ToyVocab, TrainConfig,
};
use gradsel::{ComponentManifest, GradientRecord, Parallelism};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 7;
const EPS: f64 = 1e-12;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

/// Runs one criterion, times it and prints its line. The runtime limit is
/// part of the criterion.
fn criterion(results: &mut Vec<bool>, n: usize, name: &str, limit_s: f64, body: impl FnOnce() -> Outcome) {
    let start = Instant::now();
    let out = body();
    let secs = start.elapsed().as_secs_f64();
    let pass = out.pass && secs < limit_s;
    println!(
        "criterion {n} [{}] {name}: {} ({secs:.2}s, limit {limit_s:.0}s)",
        if pass { "PASS" } else { "FAIL" },
        out.detail
    );
    results.push(pass);
}

/// Toy paraphrased-setting cache built through files, as the pipeline does.
struct Toy {
    manifest: ComponentManifest,
    base: Vec<GradientRecord>,
    queries: Vec<GradientRecord>,
    sets: Vec<CandidateSet>,
    cache: DotCache,
}

fn toy_cache() -> Toy {
    let cfg = MicroModelConfig { seed: SEED, ..MicroModelConfig::default() };
    let vocab = ToyVocab::new(cfg.vocab).unwrap();
    let samples = generate_corpus(&vocab, SEED, 200);
    let params = train_micro_model(&cfg, &samples, &TrainConfig::default()).unwrap();
    let queries: Vec<ToySample> =
        samples.iter().map(|s| perturb_sample(s, PerturbMode::Paraphrased, &params, &vocab, 0.2, SEED)).collect();
    let base_corpus = toybench::to_corpus(&samples, &vocab, CorpusRole::Base).unwrap();
    let query_corpus = toybench::to_corpus(&queries, &vocab, CorpusRole::Paraphrased).unwrap();
    let sets =
        build_candidate_sets(&query_corpus, &base_corpus, 5, Bm25Params::default(), Parallelism::Parallel).unwrap();
    let manifest = cfg.manifest().unwrap();
    let base = extract_gradients(&params, &samples, Parallelism::Parallel).unwrap();
    let qgrads = extract_gradients(&params, &queries, Parallelism::Parallel).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (bp, qp) = (dir.path().join("base.gsg"), dir.path().join("queries.gsg"));
    write_gradient_file(&bp, &manifest, &base).unwrap();
    write_gradient_file(&qp, &manifest, &qgrads).unwrap();
    let cache = build_cache(&qp, &bp, &sets, BuildOptions::default()).unwrap();
    Toy { manifest, base, queries: qgrads, sets, cache }
}

/// Cosine over the concatenation of the chosen blocks, straight from the
/// stored f32 gradients.
fn direct_cosine(a: &GradientRecord, b: &GradientRecord, subset: &[usize]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for &k in subset {
        for (&x, &y) in a.blocks[k].iter().zip(&b.blocks[k]) {
            let (x, y) = (x as f64, y as f64);
            ab += x * y;
            aa += x * x;
            bb += y * y;
        }
    }
    ab / (aa.sqrt() * bb.sqrt() + EPS)
}

fn c1_reconstruction(toy: &Toy) -> Outcome {
    let k = toy.manifest.len();
    let params = SimilarityParams::new(EPS).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for _ in 0..100 {
        let subset: Vec<usize> = loop {
            let s: Vec<usize> = (0..k).filter(|_| rng.random_bool(0.5)).collect();
            if !s.is_empty() {
                break s;
            }
        };
        let sub = Subset::new(subset.clone(), k).unwrap();
        for key in toy.cache.entries.keys() {
            let got = reconstruct_cosine(&toy.cache, key.query_id, key.cand_id, &sub, params).unwrap();
            let want = direct_cosine(&toy.queries[key.query_id as usize], &toy.base[key.cand_id as usize], &subset);
            worst = worst.max((got - want).abs());
            checked += 1;
        }
    }
    outcome(
        worst < 1e-9,
        format!("max |reconstructed - direct| = {worst:.2e} over {checked} (subset, pair) checks, tol 1e-9"),
    )
}

fn c2_full_equivalence(toy: &Toy) -> (Outcome, f64) {
    let k = toy.manifest.len();
    let all: Vec<usize> = (0..k).collect();
    let params = SimilarityParams::new(EPS).unwrap();
    let mut worst = 0.0f64;
    let mut hits_direct = 0usize;
    let mut disagreements = 0usize;
    for cs in &toy.sets {
        let q = &toy.queries[cs.query_id as usize];
        let direct: BTreeMap<u64, f64> =
            cs.members.iter().map(|&j| (j, direct_cosine(q, &toy.base[j as usize], &all))).collect();
        let rebuilt: BTreeMap<u64, f64> = cs
            .members
            .iter()
            .map(|&j| (j, reconstruct_cosine(&toy.cache, cs.query_id, j, &Subset::all(k), params).unwrap()))
            .collect();
        for j in &cs.members {
            worst = worst.max((direct[j] - rebuilt[j]).abs());
        }
        let win = |s: &BTreeMap<u64, f64>| cs.distractors().all(|j| s[&cs.query_id] > s[&j]);
        let (d, r) = (win(&direct), win(&rebuilt));
        hits_direct += d as usize;
        disagreements += (d != r) as usize;
    }
    let brute = hits_direct as f64 / toy.sets.len() as f64;
    let acc = evaluate_subset(&toy.cache, &toy.sets, &Subset::all(k), params).unwrap();
    let pass = disagreements == 0 && acc == brute && worst < 1e-9;
    (
        outcome(
            pass,
            format!(
                "S = all: accuracy {acc} vs brute force {brute}, {disagreements} decision mismatches, max |score diff| {worst:.2e}"
            ),
        ),
        acc,
    )
}

/// Independent BM25 scorer for the Algorithm 1 oracle.
fn oracle_bm25(query: &str, docs: &[String], k1: f64, b: f64) -> Vec<f64> {
    let tok = |s: &str| -> Vec<String> {
        s.to_lowercase().split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(String::from).collect()
    };
    let docs: Vec<Vec<String>> = docs.iter().map(|d| tok(d)).collect();
    let n = docs.len() as f64;
    let avg = docs.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let mut df: HashMap<&str, f64> = HashMap::new();
    for d in &docs {
        let mut seen: Vec<&str> = d.iter().map(String::as_str).collect();
        seen.sort();
        seen.dedup();
        for t in seen {
            *df.entry(t).or_default() += 1.0;
        }
    }
    docs.iter()
        .map(|d| {
            tok(query)
                .iter()
                .map(|t| {
                    let f = d.iter().filter(|x| *x == t).count() as f64;
                    if f == 0.0 {
                        return 0.0;
                    }
                    let nt = df[t.as_str()];
                    let idf = ((n - nt + 0.5) / (nt + 0.5) + 1.0).ln();
                    idf * f * (k1 + 1.0) / (f + k1 * (1.0 - b + b * d.len() as f64 / avg))
                })
                .sum()
        })
        .collect()
}

fn c3_candidates() -> Outcome {
    let vocab = ToyVocab::new(256).unwrap();
    let n = 1000;
    let b = 5;
    let base = generate_corpus(&vocab, SEED, n);
    // two thirds paraphrases, one third unrelated prompts so forced inclusion is exercised
    let unrelated = generate_corpus(&vocab, SEED + 1000, n);
    let params =
        Params::init(&MicroModelConfig { layers: 1, d_model: 8, n_heads: 2, d_ff: 8, ..Default::default() }).unwrap();
    let queries: Vec<ToySample> = base
        .iter()
        .zip(&unrelated)
        .map(|(s, u)| {
            if s.sample_id % 3 == 2 {
                u.clone()
            } else {
                perturb_sample(s, PerturbMode::Paraphrased, &params, &vocab, 0.2, SEED)
            }
        })
        .collect();
    let base_corpus = toybench::to_corpus(&base, &vocab, CorpusRole::Base).unwrap();
    let query_corpus = toybench::to_corpus(&queries, &vocab, CorpusRole::Paraphrased).unwrap();
    let sets =
        build_candidate_sets(&query_corpus, &base_corpus, b, Bm25Params::default(), Parallelism::Parallel).unwrap();

    let texts: Vec<String> = base_corpus.docs.iter().map(|d| d.text()).collect();
    let mut violations = 0usize;
    let mut forced = 0usize;
    let mut oracle_mismatch = 0usize;
    for (cs, q) in sets.iter().zip(&query_corpus.docs) {
        if cs.members.len() != b || !cs.contains(cs.query_id) || cs.query_id != q.id {
            violations += 1;
        }
        let scores = oracle_bm25(&q.text(), &texts, 1.2, 0.75);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&x, &y| scores[y].partial_cmp(&scores[x]).unwrap().then(x.cmp(&y)));
        let top: Vec<u64> = order[..b].iter().map(|&i| i as u64).collect();
        let expect_forced = !top.contains(&cs.query_id);
        if expect_forced {
            forced += 1;
            // the evicted member is the lowest-scoring one of the top b
            let evicted = top[b - 1];
            let min_kept = cs.distractors().map(|j| scores[j as usize]).fold(f64::INFINITY, f64::min);
            if cs.contains(evicted) || scores[evicted as usize] > min_kept + 1e-12 {
                violations += 1;
            }
            let mut expected = top.clone();
            expected[b - 1] = cs.query_id;
            if expected != cs.members || !cs.forced {
                oracle_mismatch += 1;
            }
        } else if top != cs.members || cs.forced {
            oracle_mismatch += 1;
        }
    }
    outcome(
        violations == 0 && oracle_mismatch == 0 && forced > 0,
        format!(
            "{} queries, {forced} forced evictions, {violations} postcondition violations, {oracle_mismatch} mismatches vs independent BM25",
            sets.len()
        ),
    )
}

fn bits(t: &SelectionTrace) -> Vec<(usize, u64, u64)> {
    t.steps.iter().map(|s| (s.component_index, s.objective_value.to_bits(), s.accuracy.to_bits())).collect()
}

fn c4_greedy(toy: &Toy, full_acc: f64) -> Outcome {
    let m = &toy.manifest;
    let p = SimilarityParams::new(EPS).unwrap();
    let sweep =
        single_component_sweep(m, &toy.cache, &toy.sets, p, Objective::Accuracy, Parallelism::Parallel).unwrap();
    let run = |mode| {
        greedy_select(m, &toy.cache, &toy.sets, p, Objective::Accuracy, Budget::Components(m.len()), mode).unwrap()
    };
    let reference = run(Parallelism::Sequential);
    let mut identical = bits(&run(Parallelism::Sequential)) == bits(&reference);
    for threads in [1, 2, 4] {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        identical &= bits(&pool.install(|| run(Parallelism::Parallel))) == bits(&reference);
    }
    let (arg, _) = sweep.argmax().unwrap();
    let first_ok = reference.steps[0].component == arg;
    let last = reference.steps.last().unwrap();
    let last_ok = reference.steps.len() == m.len() && last.accuracy == full_acc;
    outcome(
        first_ok && last_ok && identical,
        format!(
            "step 1 = {} (sweep argmax {arg}), full-budget accuracy {} vs full {full_acc}, bit-identical across sequential/1/2/4 threads: {identical}",
            reference.steps[0].component, last.accuracy
        ),
    )
}

fn c5_random_baseline() -> Outcome {
    let mut cfg = BenchConfig::new(SEED, Setting::Paraphrased);
    cfg.n_samples = 1000;
    cfg.gradients = GradientSource::RandomNoise;
    cfg.projection_fractions.clear();
    cfg.greedy = None;
    let report = run_benchmark(&cfg).unwrap();
    let acc = report.full_accuracy;
    let per = report.per_component.as_ref().unwrap();
    let (lo, hi) = per.values.iter().fold((1.0f64, 0.0f64), |(l, h), (_, v)| (l.min(*v), h.max(*v)));
    outcome(
        (0.15..=0.25).contains(&acc),
        format!("iid-noise gradients, N = 1000, b = 5: accuracy {acc:.3} (target [0.15, 0.25]); per-component range [{lo:.3}, {hi:.3}]"),
    )
}

fn c6_gradients() -> Outcome {
    let cfg = MicroModelConfig { seed: SEED, ..MicroModelConfig::default() };
    let vocab = ToyVocab::new(cfg.vocab).unwrap();
    let samples = generate_corpus(&vocab, SEED, 200);
    let trained = train_micro_model(&cfg, &samples, &TrainConfig::default()).unwrap();
    let init = Params::init(&cfg).unwrap();
    let mut worst: BTreeMap<ComponentKind, f64> = BTreeMap::new();
    let mut coords = 0;
    for (i, params) in [&init, &trained, &trained, &trained].into_iter().enumerate() {
        for c in finite_difference_check(params, &samples[i * 17].sequence(), 12, SEED + i as u64).unwrap() {
            let w = worst.entry(c.component.kind).or_default();
            *w = w.max(c.max_rel_err);
            coords += c.coords;
        }
    }
    let max = worst.values().cloned().fold(0.0, f64::max);
    let per_kind: Vec<String> = worst.iter().map(|(k, v)| format!("{}={v:.1e}", k.name())).collect();
    outcome(
        max < 1e-4 && worst.len() == 8,
        format!("max relative error {max:.2e} over {coords} coordinates, tol 1e-4 [{}]", per_kind.join(" ")),
    )
}

fn c7_projection(toy: &Toy) -> Outcome {
    // every block of two real toy gradients, each projected to 1024 rows
    let m = &toy.manifest;
    let a = &toy.queries[0];
    let b = &toy.base[0];
    let dims = vec![1024; m.len()];
    let mut est = vec![Vec::with_capacity(100); m.len()];
    let mut deterministic = true;
    for seed in 0..100u64 {
        let cfg = ProjectionConfig {
            total_dim: dims.iter().sum(),
            per_component_dims: dims.clone(),
            seed,
            distribution: Distribution::Rademacher,
            manifest_hash: m.hash(),
        };
        let pa = project_record(a, &cfg, Parallelism::Parallel).unwrap();
        let pb = project_record(b, &cfg, Parallelism::Parallel).unwrap();
        if seed < 2 {
            let again = project_record(a, &cfg, Parallelism::Sequential).unwrap();
            let same = pa.vector.iter().zip(&again.vector).all(|(x, y)| x.to_bits() == y.to_bits());
            deterministic &= same;
        }
        for (k, off) in cfg.offsets().into_iter().enumerate() {
            let r = off..off + 1024;
            est[k]
                .push(pa.vector[r.clone()].iter().zip(&pb.vector[r]).map(|(&x, &y)| x as f64 * y as f64).sum::<f64>());
        }
    }
    let mut worst_z = 0.0f64;
    let mut outside = 0;
    for (k, e) in est.iter().enumerate() {
        let truth: f64 = a.blocks[k].iter().zip(&b.blocks[k]).map(|(&x, &y)| x as f64 * y as f64).sum();
        let n = e.len() as f64;
        let mean = e.iter().sum::<f64>() / n;
        let se = (e.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
        let z = (mean - truth).abs() / se;
        worst_z = worst_z.max(z);
        outside += (z >= 3.0) as usize;
    }
    outcome(
        outside == 0 && deterministic,
        format!(
            "{} blocks x 100 seeds at 1024 rows: worst |mean - true| = {worst_z:.2} SE (limit 3), same-seed bit-identical: {deterministic}",
            m.len()
        ),
    )
}

fn main() {
    println!("acceptance run, master seed {SEED}, {} worker threads", rayon::current_num_threads());
    let mut results = Vec::new();

    let mut toy = None;
    criterion(&mut results, 1, "reconstruction exactness", 60.0, || {
        // includes building the toy cache the next criteria reuse
        let t = toy_cache();
        let out = c1_reconstruction(&t);
        toy = Some(t);
        out
    });
    let toy = toy.unwrap();
    let mut full_acc = f64::NAN;
    criterion(&mut results, 2, "full-set equivalence", 60.0, || {
        let (out, acc) = c2_full_equivalence(&toy);
        full_acc = acc;
        out
    });
    criterion(&mut results, 3, "candidate set postconditions", 60.0, c3_candidates);
    criterion(&mut results, 4, "greedy consistency", 300.0, || c4_greedy(&toy, full_acc));
    criterion(&mut results, 5, "random baseline", 300.0, c5_random_baseline);
    criterion(&mut results, 6, "gradient correctness", 300.0, c6_gradients);
    criterion(&mut results, 7, "projection statistics", 300.0, || c7_projection(&toy));
    drop(toy);

    let mut reports = Vec::new();
    criterion(&mut results, 8, "end-to-end trend", 900.0, || {
        let para = run_benchmark(&BenchConfig::new(SEED, Setting::Paraphrased)).unwrap();
        let gen = run_benchmark(&BenchConfig::new(SEED, Setting::ModelGenerated)).unwrap();
        let pf = para.full_accuracy;
        let pb = para.trace.as_ref().unwrap().best_accuracy_prefix().unwrap();
        let gf = gen.full_accuracy;
        let gb = gen.trace.as_ref().unwrap().best_accuracy_prefix().unwrap();
        let rp = |r: &gradsel::evaluation::BenchmarkReport| {
            r.projection_points.iter().map(|(f, a)| format!("{:.0}%:{a:.3}", f * 100.0)).collect::<Vec<_>>().join(" ")
        };
        let pass = pf >= 0.8 && pb.1 >= pf - 0.02 && gb.1 >= gf;
        let detail = format!(
            "paraphrased full {pf:.3} (>= 0.8), best greedy prefix {:.3} @ {} comps (>= full - 0.02), RP {}; model-generated full {gf:.3}, best greedy prefix {:.3} @ {} comps (>= full), RP {}",
            pb.1,
            pb.0,
            rp(&para),
            gb.1,
            gb.0,
            rp(&gen)
        );
        reports = vec![para, gen];
        outcome(pass, detail)
    });
    criterion(&mut results, 9, "cost accounting", 1.0, || {
        let mut pass = !reports.is_empty();
        let mut parts = Vec::new();
        for r in &reports {
            let greedy = r.timing("greedy").unwrap_or(f64::INFINITY);
            let dots = r.timing("dot_products").unwrap_or(0.0);
            let share = greedy / dots;
            pass &= share < 0.05;
            parts.push(format!(
                "{:?}: greedy {greedy:.4}s vs dot products {dots:.3}s = {:.2}%",
                r.setting,
                share * 100.0
            ));
        }
        outcome(pass, format!("{} (limit 5%)", parts.join("; ")))
    });

    let passed = results.iter().filter(|p| **p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
