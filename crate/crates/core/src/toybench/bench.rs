use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{self, PerturbMode, ToySample, ToyVocab};
use super::model::{MicroModelConfig, Params};
use super::train::{train_micro_model, TrainConfig};
use crate::candidates::{build_candidate_sets, Bm25Params, Corpus, CorpusRole};
use crate::dot_cache::{build_cache, BuildOptions};
use crate::error::{Error, Result};
use crate::evaluation::{BenchmarkReport, StageTiming, Surrogate};
use crate::manifest::{ComponentManifest, GradientRecord};
use crate::par::{self, Parallelism};
use crate::projection::{self, Distribution, ProjectedSet, ProjectionConfig};
use crate::selection::{self, Budget, Objective};
use crate::similarity::{self, SimilarityParams, Subset};
use crate::store::write_gradient_file;

/// Stage names, in execution order.
pub const STAGES: [&str; 10] = [
    "generate",
    "train",
    "perturb",
    "candidates",
    "gradients",
    "dot_products",
    "full_eval",
    "sweep",
    "greedy",
    "projection",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Setting {
    Paraphrased,
    ModelGenerated,
}

impl Setting {
    pub fn mode(self) -> PerturbMode {
        match self {
            Setting::Paraphrased => PerturbMode::Paraphrased,
            Setting::ModelGenerated => PerturbMode::ModelGenerated,
        }
    }

    pub fn role(self) -> CorpusRole {
        match self {
            Setting::Paraphrased => CorpusRole::Paraphrased,
            Setting::ModelGenerated => CorpusRole::ModelGenerated,
        }
    }
}

impl std::str::FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paraphrased" => Ok(Setting::Paraphrased),
            "model-generated" | "generated" => Ok(Setting::ModelGenerated),
            _ => Err(Error::Invalid(format!("unknown setting {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradientSource {
    /// Per-sample gradients of the trained micro model.
    Model,
    /// Seeded iid uniform noise in place of every gradient (ablation).
    RandomNoise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub seed: u64,
    pub model: MicroModelConfig,
    pub train: TrainConfig,
    pub n_samples: usize,
    pub b: usize,
    pub setting: Setting,
    pub perturb_fraction: f64,
    pub gradients: GradientSource,
    pub bm25: Bm25Params,
    pub epsilon: f64,
    pub sweep: bool,
    pub greedy: Option<Objective>,
    pub projection_fractions: Vec<f64>,
    pub projection_distribution: Distribution,
    /// Where intermediate files go; a temporary directory when unset.
    #[serde(skip)]
    pub workdir: Option<PathBuf>,
    #[serde(skip)]
    pub parallelism: Parallelism,
}

impl BenchConfig {
    pub fn new(seed: u64, setting: Setting) -> Self {
        BenchConfig {
            seed,
            model: MicroModelConfig { seed, ..MicroModelConfig::default() },
            train: TrainConfig::default(),
            n_samples: 200,
            b: 5,
            setting,
            perturb_fraction: 0.2,
            gradients: GradientSource::Model,
            bm25: Bm25Params::default(),
            epsilon: similarity::DEFAULT_EPSILON,
            sweep: true,
            greedy: Some(Objective::Accuracy),
            projection_fractions: vec![0.01, 0.05],
            projection_distribution: Distribution::Rademacher,
            workdir: None,
            parallelism: Parallelism::Parallel,
        }
    }
}

/// Per-sample gradients at `params`, extracted in parallel across samples.
pub fn extract_gradients(params: &Params, samples: &[ToySample], mode: Parallelism) -> Result<Vec<GradientRecord>> {
    par::try_map_slice(mode, samples, |s| {
        if s.completion_tokens.is_empty() {
            return Err(Error::EmptyCompletion(s.sample_id));
        }
        params.sample_gradient(s.sample_id, &s.sequence())
    })
}

/// Seeded iid noise records, uniform on [-1, 1).
pub fn noise_gradients(
    manifest: &ComponentManifest,
    ids: impl IntoIterator<Item = u64>,
    seed: u64,
    stream: u64,
) -> Vec<GradientRecord> {
    ids.into_iter()
        .map(|id| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stream.rotate_left(17));
            rng.set_stream(id);
            let blocks = manifest
                .components
                .iter()
                .map(|c| (0..c.param_count).map(|_| rng.random_range(-1.0f32..1.0)).collect())
                .collect();
            GradientRecord::new(id, blocks)
        })
        .collect()
}

struct Timer {
    timings: Vec<StageTiming>,
}

impl Timer {
    fn stage<T>(&mut self, name: &str, cached: bool, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f().map_err(|e| Error::Invalid(format!("stage {name} failed: {e}")))?;
        let seconds = start.elapsed().as_secs_f64();
        match self.timings.iter_mut().find(|t| t.stage == name) {
            Some(t) => t.seconds += seconds,
            None => self.timings.push(StageTiming { stage: name.into(), seconds, cached }),
        }
        Ok(out)
    }
}

/// Runs the whole pipeline: corpus, training, query construction, BM25
/// candidates, gradients, dot cache, surrogate evaluation.
pub fn run_benchmark(cfg: &BenchConfig) -> Result<BenchmarkReport> {
    run_benchmark_with(cfg, None)
}

/// Same as [`run_benchmark`], with an optional externally supplied query
/// corpus (e.g. real paraphrases) in place of the built-in perturbation.
pub fn run_benchmark_with(cfg: &BenchConfig, external_queries: Option<&Corpus>) -> Result<BenchmarkReport> {
    if cfg.n_samples == 0 {
        return Err(Error::Invalid("benchmark needs at least one sample".into()));
    }
    let mode = cfg.parallelism;
    let sim = SimilarityParams::new(cfg.epsilon)?;
    let tmp;
    let workdir = match &cfg.workdir {
        Some(p) => {
            std::fs::create_dir_all(p)?;
            p.clone()
        }
        None => {
            tmp = tempfile::tempdir()?;
            tmp.path().to_path_buf()
        }
    };
    let vocab = ToyVocab::new(cfg.model.vocab)?;
    let manifest = cfg.model.manifest()?;
    let mut t = Timer { timings: Vec::new() };

    let base = t.stage("generate", false, || Ok(corpus::generate_corpus(&vocab, cfg.seed, cfg.n_samples)))?;
    let params = t.stage("train", false, || train_micro_model(&cfg.model, &base, &cfg.train))?;
    let queries: Vec<ToySample> = t.stage("perturb", false, || match external_queries {
        Some(c) => corpus::from_corpus(c, &vocab),
        None => Ok(base
            .iter()
            .map(|s| corpus::perturb_sample(s, cfg.setting.mode(), &params, &vocab, cfg.perturb_fraction, cfg.seed))
            .collect()),
    })?;
    let base_corpus = corpus::to_corpus(&base, &vocab, CorpusRole::Base)?;
    let query_corpus = corpus::to_corpus(&queries, &vocab, cfg.setting.role())?;
    let cand_sets =
        t.stage("candidates", false, || build_candidate_sets(&query_corpus, &base_corpus, cfg.b, cfg.bm25, mode))?;

    let base_path = workdir.join("grads_base.gsg");
    let query_path = workdir.join("grads_queries.gsg");
    t.stage("gradients", false, || {
        let (bg, qg) = match cfg.gradients {
            GradientSource::Model => {
                (extract_gradients(&params, &base, mode)?, extract_gradients(&params, &queries, mode)?)
            }
            GradientSource::RandomNoise => {
                let ids = 0..cfg.n_samples as u64;
                (noise_gradients(&manifest, ids.clone(), cfg.seed, 1), noise_gradients(&manifest, ids, cfg.seed, 2))
            }
        };
        write_gradient_file(&base_path, &manifest, &bg)?;
        write_gradient_file(&query_path, &manifest, &qg)
    })?;

    let opts = BuildOptions { parallelism: mode, ..BuildOptions::default() };
    let cache = t.stage("dot_products", false, || build_cache(&query_path, &base_path, &cand_sets, opts))?;
    let full_accuracy = t.stage("full_eval", true, || {
        selection::evaluate_subset(&cache, &cand_sets, &Subset::all(manifest.len()), sim)
    })?;
    let per_component = if cfg.sweep {
        Some(t.stage("sweep", true, || {
            selection::single_component_sweep(&manifest, &cache, &cand_sets, sim, Objective::Accuracy, mode)
        })?)
    } else {
        None
    };
    let trace = match cfg.greedy {
        Some(objective) => Some(t.stage("greedy", true, || {
            selection::greedy_select(
                &manifest,
                &cache,
                &cand_sets,
                sim,
                objective,
                Budget::Components(manifest.len()),
                mode,
            )
        })?),
        None => None,
    };

    let mut projection_points = Vec::new();
    for &fraction in &cfg.projection_fractions {
        let point = t.stage("projection", false, || {
            let dim = ProjectionConfig::dim_for_fraction(&manifest, fraction)?;
            let pc = ProjectionConfig::new(&manifest, dim, cfg.seed, cfg.projection_distribution)?;
            let (pb, pq) = (workdir.join("proj_base.gsp"), workdir.join("proj_queries.gsp"));
            projection::project_file(&base_path, &pb, &pc, 64, mode)?;
            projection::project_file(&query_path, &pq, &pc, 64, mode)?;
            let table = projection::projected_score_table(
                &ProjectedSet::load(&pq)?,
                &ProjectedSet::load(&pb)?,
                &cand_sets,
                sim,
                mode,
            )?;
            Ok((dim as f64 / manifest.total_params as f64, similarity::accuracy_from_table(&table, &cand_sets)?))
        })?;
        projection_points.push(point);
    }

    let (surrogate, accuracy) = match &trace {
        Some(tr) => {
            let (prefix, acc) = tr.best_accuracy_prefix().expect("trace has at least one step");
            (Surrogate::Greedy { objective: tr.objective, prefix }, acc)
        }
        None => (Surrogate::Full, full_accuracy),
    };

    let mut metadata = BTreeMap::new();
    metadata.insert("master_seed".into(), cfg.seed.to_string());
    metadata.insert("config".into(), serde_json::to_string(cfg)?);
    metadata.insert("manifest_hash".into(), manifest.hash());
    metadata.insert("total_params".into(), manifest.total_params.to_string());
    metadata.insert("loss_normalization".into(), "mean_over_completion_tokens".into());
    metadata.insert("forced_candidates".into(), cand_sets.iter().filter(|c| c.forced).count().to_string());
    metadata.insert("cached_pairs".into(), cache.len().to_string());

    let report = BenchmarkReport {
        setting: cfg.setting,
        surrogate,
        accuracy,
        full_accuracy,
        per_component,
        trace,
        projection_points,
        timings: t.timings,
        metadata,
    };
    report.validate()?;
    Ok(report)
}
