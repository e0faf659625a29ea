//! `gradsel` command line: runs the attribution pipeline stage by stage.
//! Stages talk to each other only through files in a working directory.

mod svg;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use gradsel::candidates::{
    build_candidate_sets, load_candidate_sets, save_candidate_sets, Bm25Params, CandidateSet, Corpus, CorpusRole,
};
use gradsel::dot_cache::{build_cache, BuildOptions, DotCache};
use gradsel::evaluation::{self, BenchmarkReport, StageTiming, Surrogate};
use gradsel::projection::{self, Distribution, ProjectedSet, ProjectionConfig};
use gradsel::selection::{self, Budget, Objective, SelectionTrace};
use gradsel::similarity::{self, SimilarityParams, Subset};
use gradsel::store::write_gradient_file;
use gradsel::toybench::{
    extract_gradients, finite_difference_check, from_corpus, generate_corpus, perturb_sample, to_corpus,
    train_micro_model, MicroModelConfig, Params, PerturbMode, Setting, ToySample, ToyVocab, TrainConfig,
};
use gradsel::{par, ComponentId, ComponentManifest, Parallelism};

const DEFAULT_SEED: u64 = 7;
const GRAD_CHECK_THRESHOLD: f64 = 1e-4;

#[derive(Parser, Serialize)]
#[command(
    name = "gradsel",
    version,
    about = "Gradient-based instance attribution: component selection vs. random projection"
)]
struct Cli {
    /// Worker threads for data-parallel stages (0 = one per core). Results
    /// do not depend on this value.
    #[arg(long, global = true, env = "GRADSEL_THREADS", default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
enum Command {
    /// Generate the toy corpus, train the micro model and write the
    /// paraphrased and model-generated query corpora.
    Toygen(ToygenArgs),
    /// Per-sample gradients for each corpus file.
    Grads(GradsArgs),
    /// BM25 candidate sets and the component-wise dot-product cache.
    Dots(DotsArgs),
    /// Single-component sweep and forward greedy selection.
    Greedy(GreedyArgs),
    /// Component-wise random projection of the gradient files.
    Project(ProjectArgs),
    /// Retrieval accuracy of one surrogate.
    Eval(EvalArgs),
    /// CSV tables and SVG plots from the stage outputs.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum SettingArg {
    Paraphrased,
    ModelGenerated,
}

impl SettingArg {
    fn setting(self) -> Setting {
        match self {
            SettingArg::Paraphrased => Setting::Paraphrased,
            SettingArg::ModelGenerated => Setting::ModelGenerated,
        }
    }

    fn stem(self) -> &'static str {
        match self {
            SettingArg::Paraphrased => "paraphrased",
            SettingArg::ModelGenerated => "model_generated",
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ObjectiveArg {
    Accuracy,
    Alignment,
}

impl ObjectiveArg {
    fn objective(self) -> Objective {
        match self {
            ObjectiveArg::Accuracy => Objective::Accuracy,
            ObjectiveArg::Alignment => Objective::Alignment,
        }
    }

    fn name(self) -> &'static str {
        match self {
            ObjectiveArg::Accuracy => "accuracy",
            ObjectiveArg::Alignment => "alignment",
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum DistributionArg {
    Rademacher,
    Gaussian,
}

impl DistributionArg {
    fn distribution(self) -> Distribution {
        match self {
            DistributionArg::Rademacher => Distribution::Rademacher,
            DistributionArg::Gaussian => Distribution::Gaussian,
        }
    }

    fn name(self) -> &'static str {
        match self {
            DistributionArg::Rademacher => "rademacher",
            DistributionArg::Gaussian => "gaussian",
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum SurrogateArg {
    Full,
    Subset,
    Greedy,
    Projection,
}

#[derive(Args, Serialize)]
struct ToygenArgs {
    /// Working directory for all outputs.
    #[arg(long, default_value = "gradsel-run")]
    dir: PathBuf,
    /// Number of training samples N.
    #[arg(long, default_value_t = 200)]
    n: usize,
    /// Master seed; every random choice downstream derives from it.
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Fraction of word tokens swapped for synonyms in the queries.
    #[arg(long, default_value_t = 0.2)]
    perturb_fraction: f64,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    d_ff: usize,
    #[arg(long, default_value_t = 256)]
    vocab: usize,
    /// Training steps.
    #[arg(long, default_value_t = 60)]
    steps: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
}

#[derive(Args, Serialize)]
struct GradsArgs {
    #[arg(long, default_value = "gradsel-run")]
    dir: PathBuf,
    /// Toy description written by `toygen` [default: DIR/toy.json].
    #[arg(long)]
    toy: Option<PathBuf>,
    /// Corpus files (JSONL), repeatable [default: the three toygen corpora in DIR].
    #[arg(long)]
    corpus: Vec<PathBuf>,
    /// Also compare analytic gradients with central finite differences.
    #[arg(long)]
    check_grads: bool,
    /// Coordinates per component for --check-grads.
    #[arg(long, default_value_t = 6)]
    check_coords: usize,
}

#[derive(Args, Serialize)]
struct DotsArgs {
    #[arg(long, default_value = "gradsel-run")]
    dir: PathBuf,
    #[arg(long, value_enum, default_value = "paraphrased")]
    setting: SettingArg,
    /// Candidate set size.
    #[arg(long, default_value_t = 5)]
    b: usize,
    #[arg(long, default_value_t = 1.2)]
    bm25_k1: f64,
    #[arg(long, default_value_t = 0.75)]
    bm25_b: f64,
}

#[derive(Args, Serialize)]
struct GreedyArgs {
    #[arg(long, default_value = "gradsel-run")]
    dir: PathBuf,
    #[arg(long, value_enum, default_value = "paraphrased")]
    setting: SettingArg,
    #[arg(long, value_enum, default_value = "accuracy")]
    objective: ObjectiveArg,
    /// Stop after this many components [default: all].
    #[arg(long, conflicts_with = "budget_fraction")]
    budget_components: Option<usize>,
    /// Only admit components that keep the selected parameter fraction at or below this.
    #[arg(long)]
    budget_fraction: Option<f64>,
    #[arg(long, default_value_t = similarity::DEFAULT_EPSILON)]
    epsilon: f64,
}

#[derive(Args, Serialize)]
struct ProjectionArgs {
    /// Projection size as a fraction of the parameter count.
    #[arg(long, default_value_t = 0.01, conflicts_with = "dim")]
    dim_frac: f64,
    /// Absolute projection size (overrides --dim-frac).
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long, value_enum, default_value = "rademacher")]
    distribution: DistributionArg,
}

impl ProjectionArgs {
    fn config(&self, manifest: &ComponentManifest) -> anyhow::Result<ProjectionConfig> {
        let dim = match self.dim {
            Some(d) => d,
            None => ProjectionConfig::dim_for_fraction(manifest, self.dim_frac).map_err(usage)?,
        };
        ProjectionConfig::new(manifest, dim, self.seed, self.distribution.distribution()).map_err(usage)
    }

    fn tag(&self, cfg: &ProjectionConfig) -> String {
        format!("rp-d{}-s{}-{}", cfg.total_dim, cfg.seed, self.distribution.name())
    }
}

#[derive(Args, Serialize)]
struct ProjectArgs {
    #[arg(long, default_value = "gradsel-run")]
    dir: PathBuf,
    #[arg(long, value_enum, default_value = "paraphrased")]
    setting: SettingArg,
    #[command(flatten)]
    projection: ProjectionArgs,
    /// Records decoded per batch.
    #[arg(long, default_value_t = 64)]
    batch: usize,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long, default_value = "gradsel-run")]
    dir: PathBuf,
    #[arg(long, value_enum, default_value = "paraphrased")]
    setting: SettingArg,
    #[arg(long, value_enum, default_value = "full")]
    surrogate: SurrogateArg,
    /// Comma-separated components for `--surrogate subset`, e.g. `embed,L1.mlp_down`.
    #[arg(long, value_delimiter = ',')]
    components: Vec<String>,
    /// Trace objective for `--surrogate greedy`.
    #[arg(long, value_enum, default_value = "accuracy")]
    objective: ObjectiveArg,
    #[command(flatten)]
    projection: ProjectionArgs,
    #[arg(long, default_value_t = similarity::DEFAULT_EPSILON)]
    epsilon: f64,
    /// Report path [default: DIR/<setting>.eval-<surrogate>.json].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct ReportArgs {
    #[arg(long, default_value = "gradsel-run")]
    dir: PathBuf,
    #[arg(long, value_enum, default_value = "paraphrased")]
    setting: SettingArg,
    /// Output directory [default: DIR/report].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = similarity::DEFAULT_EPSILON)]
    epsilon: f64,
}

/// Invalid flags or inputs; maps to exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(e: impl std::fmt::Display) -> anyhow::Error {
    UsageError(e.to_string()).into()
}

fn require_file(path: &Path) -> anyhow::Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("input file not found: {}", path.display())))
    }
}

/// Machine-parseable log line on stdout.
fn emit(value: serde_json::Value) {
    println!("{value}");
}

fn wrote(path: &Path) {
    emit(json!({"event": "wrote", "path": path}));
}

/// Description of the toy setup, written by `toygen` and read by `grads`.
#[derive(Serialize, Deserialize)]
struct ToyFile {
    seed: u64,
    n_samples: usize,
    perturb_fraction: f64,
    model: MicroModelConfig,
    train: TrainConfig,
    /// Lets `grads` confirm that retraining reproduced the same weights.
    params_fingerprint: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = if e.downcast_ref::<UsageError>().is_some() { 2 } else { 1 };
            eprintln!("{}", json!({"event": "error", "exit_code": code, "message": format!("{e:#}")}));
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    par::init_threads(cli.threads).map_err(|e| anyhow!("thread pool: {e}"))?;
    let mode = if cli.threads == 1 { Parallelism::Sequential } else { Parallelism::Parallel };
    let mut config = serde_json::to_value(&cli.command)?;
    let name = config.as_object().and_then(|o| o.keys().next().cloned()).unwrap_or_default();
    let args = config.as_object_mut().and_then(|o| o.remove(&name)).unwrap_or_default();
    emit(json!({"event": "config", "command": name, "threads": par::threads(mode), "config": args}));
    let start = Instant::now();
    match &cli.command {
        Command::Toygen(a) => toygen(a),
        Command::Grads(a) => grads(a, mode),
        Command::Dots(a) => dots(a, mode),
        Command::Greedy(a) => greedy(a, mode),
        Command::Project(a) => project(a, mode),
        Command::Eval(a) => eval(a, mode),
        Command::Report(a) => report(a),
    }?;
    emit(json!({"event": "done", "command": name, "seconds": start.elapsed().as_secs_f64()}));
    Ok(())
}

fn corpus_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.jsonl"))
}

fn grads_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.gsg"))
}

fn toygen(a: &ToygenArgs) -> anyhow::Result<()> {
    if a.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    if !(0.0..=1.0).contains(&a.perturb_fraction) {
        return Err(usage("--perturb-fraction must lie in [0, 1]"));
    }
    if a.batch == 0 || !a.lr.is_finite() || a.lr <= 0.0 {
        return Err(usage("--batch and --lr must be positive"));
    }
    let model = MicroModelConfig {
        layers: a.layers,
        d_model: a.d_model,
        n_heads: a.heads,
        d_ff: a.d_ff,
        vocab: a.vocab,
        seed: a.seed,
    };
    model.validate().map_err(usage)?;
    let vocab = ToyVocab::new(a.vocab).map_err(usage)?;
    let train = TrainConfig { steps: a.steps, lr: a.lr, batch: a.batch };
    std::fs::create_dir_all(&a.dir).with_context(|| format!("creating {}", a.dir.display()))?;

    let base = generate_corpus(&vocab, a.seed, a.n);
    let params = train_micro_model(&model, &base, &train)?;
    let sets: [(&str, CorpusRole, Vec<ToySample>); 3] = [
        ("base", CorpusRole::Base, base.clone()),
        ("paraphrased", CorpusRole::Paraphrased, perturbed(&base, PerturbMode::Paraphrased, &params, &vocab, a)),
        (
            "model_generated",
            CorpusRole::ModelGenerated,
            perturbed(&base, PerturbMode::ModelGenerated, &params, &vocab, a),
        ),
    ];
    for (stem, role, samples) in sets {
        let path = corpus_path(&a.dir, stem);
        to_corpus(&samples, &vocab, role)?.save_jsonl(&path)?;
        wrote(&path);
    }
    let toy = ToyFile {
        seed: a.seed,
        n_samples: a.n,
        perturb_fraction: a.perturb_fraction,
        model,
        train,
        params_fingerprint: params.fingerprint(),
    };
    let path = a.dir.join("toy.json");
    std::fs::write(&path, serde_json::to_string_pretty(&toy)? + "\n")?;
    wrote(&path);
    Ok(())
}

fn perturbed(
    base: &[ToySample],
    mode: PerturbMode,
    params: &Params,
    vocab: &ToyVocab,
    a: &ToygenArgs,
) -> Vec<ToySample> {
    base.iter().map(|s| perturb_sample(s, mode, params, vocab, a.perturb_fraction, a.seed)).collect()
}

fn role_for(path: &Path) -> CorpusRole {
    match path.file_stem().and_then(|s| s.to_str()) {
        Some("paraphrased") => CorpusRole::Paraphrased,
        Some("model_generated") => CorpusRole::ModelGenerated,
        _ => CorpusRole::Base,
    }
}

fn grads(a: &GradsArgs, mode: Parallelism) -> anyhow::Result<()> {
    let toy_path = a.toy.clone().unwrap_or_else(|| a.dir.join("toy.json"));
    let corpora: Vec<PathBuf> = if a.corpus.is_empty() {
        ["base", "paraphrased", "model_generated"].iter().map(|s| corpus_path(&a.dir, s)).collect()
    } else {
        a.corpus.clone()
    };
    require_file(&toy_path)?;
    for c in &corpora {
        require_file(c)?;
    }
    if a.check_grads && a.check_coords == 0 {
        return Err(usage("--check-coords must be positive"));
    }
    let toy: ToyFile = serde_json::from_slice(&std::fs::read(&toy_path)?)
        .map_err(|e| usage(format!("{}: {e}", toy_path.display())))?;
    let vocab = ToyVocab::new(toy.model.vocab).map_err(usage)?;
    let manifest = toy.model.manifest().map_err(usage)?;
    let corpora: Vec<(PathBuf, Corpus)> = corpora
        .into_iter()
        .map(|p| {
            let c = Corpus::load_jsonl(&p, role_for(&p)).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            Ok((p, c))
        })
        .collect::<anyhow::Result<_>>()?;

    let base = generate_corpus(&vocab, toy.seed, toy.n_samples);
    let params = train_micro_model(&toy.model, &base, &toy.train)?;
    if params.fingerprint() != toy.params_fingerprint {
        bail!("retrained weights do not match the fingerprint in {}", toy_path.display());
    }
    std::fs::create_dir_all(&a.dir)?;
    let manifest_path = a.dir.join("manifest.json");
    manifest.save_json(&manifest_path)?;
    wrote(&manifest_path);

    for (path, corpus) in &corpora {
        let samples = from_corpus(corpus, &vocab)?;
        let records = extract_gradients(&params, &samples, mode)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).ok_or_else(|| usage("corpus path has no file name"))?;
        let out = grads_path(&a.dir, stem);
        write_gradient_file(&out, &manifest, &records)?;
        emit(json!({"event": "wrote", "path": out, "records": records.len(), "manifest_hash": manifest.hash()}));

        if a.check_grads {
            let mut worst = 0.0f64;
            for s in samples.iter().take(3) {
                for c in finite_difference_check(&params, &s.sequence(), a.check_coords, toy.seed)? {
                    worst = worst.max(c.max_rel_err);
                }
            }
            emit(
                json!({"event": "grad_check", "corpus": path, "max_rel_err": worst, "threshold": GRAD_CHECK_THRESHOLD}),
            );
            if worst >= GRAD_CHECK_THRESHOLD {
                bail!("finite-difference check failed: max relative error {worst:e}");
            }
        }
    }
    Ok(())
}

fn candidates_path(dir: &Path, s: SettingArg) -> PathBuf {
    dir.join(format!("{}.candidates.json", s.stem()))
}

fn cache_path(dir: &Path, s: SettingArg) -> PathBuf {
    dir.join(format!("{}.gsd", s.stem()))
}

fn dots(a: &DotsArgs, mode: Parallelism) -> anyhow::Result<()> {
    let (base_c, query_c) = (corpus_path(&a.dir, "base"), corpus_path(&a.dir, a.setting.stem()));
    let (base_g, query_g) = (grads_path(&a.dir, "base"), grads_path(&a.dir, a.setting.stem()));
    for p in [&base_c, &query_c, &base_g, &query_g] {
        require_file(p)?;
    }
    let bm25 = Bm25Params { k1: a.bm25_k1, b: a.bm25_b };
    bm25.validate().map_err(usage)?;
    let base = Corpus::load_jsonl(&base_c, CorpusRole::Base)?;
    let queries = Corpus::load_jsonl(&query_c, a.setting.setting().role())?;
    if a.b == 0 || a.b > base.len() {
        return Err(usage(format!("--b must lie in 1..={}", base.len())));
    }
    let sets = build_candidate_sets(&queries, &base, a.b, bm25, mode)?;
    let cpath = candidates_path(&a.dir, a.setting);
    save_candidate_sets(&sets, &cpath)?;
    emit(
        json!({"event": "wrote", "path": cpath, "sets": sets.len(), "forced": sets.iter().filter(|s| s.forced).count()}),
    );

    let cache = build_cache(&query_g, &base_g, &sets, BuildOptions { parallelism: mode, ..BuildOptions::default() })?;
    let path = cache_path(&a.dir, a.setting);
    cache.save(&path)?;
    emit(json!({"event": "wrote", "path": path, "pairs": cache.len(), "components": cache.n_components}));
    Ok(())
}

/// Manifest, dot cache and candidate sets of one setting.
fn load_stage(dir: &Path, setting: SettingArg) -> anyhow::Result<(ComponentManifest, DotCache, Vec<CandidateSet>)> {
    let (mpath, cpath, spath) = (dir.join("manifest.json"), cache_path(dir, setting), candidates_path(dir, setting));
    for p in [&mpath, &cpath, &spath] {
        require_file(p)?;
    }
    let manifest = ComponentManifest::load_json(&mpath)?;
    let cache = DotCache::load(&cpath, &manifest)?;
    let sets = load_candidate_sets(&spath)?;
    Ok((manifest, cache, sets))
}

fn sweep_path(dir: &Path, s: SettingArg, o: ObjectiveArg) -> PathBuf {
    dir.join(format!("{}.sweep-{}.csv", s.stem(), o.name()))
}

fn trace_path(dir: &Path, s: SettingArg, o: ObjectiveArg) -> PathBuf {
    dir.join(format!("{}.greedy-{}.csv", s.stem(), o.name()))
}

fn greedy(a: &GreedyArgs, mode: Parallelism) -> anyhow::Result<()> {
    let sim = SimilarityParams::new(a.epsilon).map_err(usage)?;
    let (manifest, cache, sets) = load_stage(&a.dir, a.setting)?;
    let budget = match (a.budget_components, a.budget_fraction) {
        (_, Some(f)) if !(f > 0.0 && f <= 1.0) => return Err(usage("--budget-fraction must lie in (0, 1]")),
        (_, Some(f)) => Budget::ParamFraction(f),
        (Some(0), None) => return Err(usage("--budget-components must be positive")),
        (Some(k), None) => Budget::Components(k.min(manifest.len())),
        (None, None) => Budget::Components(manifest.len()),
    };
    let objective = a.objective.objective();
    let sweep = selection::single_component_sweep(&manifest, &cache, &sets, sim, objective, mode)?;
    let spath = sweep_path(&a.dir, a.setting, a.objective);
    sweep.write_csv(&spath)?;
    wrote(&spath);
    let trace = selection::greedy_select(&manifest, &cache, &sets, sim, objective, budget, mode)?;
    let tpath = trace_path(&a.dir, a.setting, a.objective);
    trace.write_csv(&tpath)?;
    let (argmax, argmax_value) = sweep.argmax().expect("manifest is never empty");
    let (prefix, best) = trace.best_prefix().expect("greedy selects at least one component");
    emit(json!({
        "event": "wrote",
        "path": tpath,
        "steps": trace.steps.len(),
        "first": trace.steps[0].component.to_string(),
        "sweep_argmax": argmax.to_string(),
        "sweep_argmax_value": argmax_value,
        "best_prefix": prefix,
        "best_value": best,
    }));
    Ok(())
}

fn project(a: &ProjectArgs, mode: Parallelism) -> anyhow::Result<()> {
    let (base_g, query_g, mpath) =
        (grads_path(&a.dir, "base"), grads_path(&a.dir, a.setting.stem()), a.dir.join("manifest.json"));
    for p in [&base_g, &query_g, &mpath] {
        require_file(p)?;
    }
    if a.batch == 0 {
        return Err(usage("--batch must be positive"));
    }
    let manifest = ComponentManifest::load_json(&mpath)?;
    let cfg = a.projection.config(&manifest)?;
    let tag = a.projection.tag(&cfg);
    for (input, stem) in [(&base_g, "base"), (&query_g, a.setting.stem())] {
        let out = a.dir.join(format!("{stem}.{tag}.gsp"));
        projection::project_file(input, &out, &cfg, a.batch, mode)?;
        emit(
            json!({"event": "wrote", "path": out, "total_dim": cfg.total_dim, "per_component_dims": cfg.per_component_dims}),
        );
    }
    Ok(())
}

fn eval(a: &EvalArgs, mode: Parallelism) -> anyhow::Result<()> {
    let sim = SimilarityParams::new(a.epsilon).map_err(usage)?;
    let (manifest, cache, sets) = load_stage(&a.dir, a.setting)?;
    let start = Instant::now();
    let full_accuracy = selection::evaluate_subset(&cache, &sets, &Subset::all(manifest.len()), sim)?;
    let mut points = Vec::new();
    let (surrogate, accuracy, label) = match a.surrogate {
        SurrogateArg::Full => (Surrogate::Full, full_accuracy, "full".to_string()),
        SurrogateArg::Subset => {
            if a.components.is_empty() {
                return Err(usage("--surrogate subset needs --components"));
            }
            let ids: Vec<ComponentId> = a
                .components
                .iter()
                .map(|s| ComponentId::parse(s.trim()).ok_or_else(|| usage(format!("unknown component {s:?}"))))
                .collect::<anyhow::Result<_>>()?;
            let idx: Vec<usize> = ids
                .iter()
                .map(|id| manifest.index_of(*id).ok_or_else(|| usage(format!("component {id} not in manifest"))))
                .collect::<anyhow::Result<_>>()?;
            let subset = Subset::new(idx, manifest.len()).map_err(usage)?;
            let acc = selection::evaluate_subset(&cache, &sets, &subset, sim)?;
            (Surrogate::Subset(ids), acc, "subset".to_string())
        }
        SurrogateArg::Greedy => {
            let path = trace_path(&a.dir, a.setting, a.objective);
            require_file(&path)?;
            let trace = SelectionTrace::read_csv(&path, a.objective.objective(), &manifest)?;
            let (prefix, _) = trace.best_accuracy_prefix().ok_or_else(|| anyhow!("empty trace {}", path.display()))?;
            let subset = trace.subset(prefix, manifest.len())?;
            let acc = selection::evaluate_subset(&cache, &sets, &subset, sim)?;
            (Surrogate::Greedy { objective: trace.objective, prefix }, acc, format!("greedy-{}", a.objective.name()))
        }
        SurrogateArg::Projection => {
            let cfg = a.projection.config(&manifest)?;
            let tag = a.projection.tag(&cfg);
            let (pb, pq) =
                (a.dir.join(format!("base.{tag}.gsp")), a.dir.join(format!("{}.{tag}.gsp", a.setting.stem())));
            require_file(&pb)?;
            require_file(&pq)?;
            let (qs, bs) = (ProjectedSet::load(&pq)?, ProjectedSet::load(&pb)?);
            if qs.config != cfg {
                bail!("{} was projected with a different configuration", pq.display());
            }
            let table = projection::projected_score_table(&qs, &bs, &sets, sim, mode)?;
            let acc = similarity::accuracy_from_table(&table, &sets)?;
            points.push((cfg.total_dim as f64 / manifest.total_params as f64, acc));
            (Surrogate::Projection(cfg), acc, tag)
        }
    };
    let mut metadata = std::collections::BTreeMap::new();
    metadata.insert("manifest_hash".to_string(), manifest.hash());
    metadata.insert("total_params".to_string(), manifest.total_params.to_string());
    metadata.insert("cached_pairs".to_string(), cache.len().to_string());
    metadata.insert("forced_candidates".to_string(), sets.iter().filter(|s| s.forced).count().to_string());
    if let Ok(toy) = std::fs::read(a.dir.join("toy.json")) {
        if let Ok(toy) = serde_json::from_slice::<ToyFile>(&toy) {
            metadata.insert("master_seed".to_string(), toy.seed.to_string());
        }
    }
    let report = BenchmarkReport {
        setting: a.setting.setting(),
        surrogate,
        accuracy,
        full_accuracy,
        per_component: None,
        trace: None,
        projection_points: points,
        timings: vec![StageTiming { stage: "eval".into(), seconds: start.elapsed().as_secs_f64(), cached: true }],
        metadata,
    };
    report.validate()?;
    let out = a.out.clone().unwrap_or_else(|| a.dir.join(format!("{}.eval-{label}.json", a.setting.stem())));
    report.save_json(&out)?;
    emit(json!({"event": "wrote", "path": out, "accuracy": accuracy, "full_accuracy": full_accuracy}));
    Ok(())
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    wrote(path);
    Ok(())
}

fn report(a: &ReportArgs) -> anyhow::Result<()> {
    let sim = SimilarityParams::new(a.epsilon).map_err(usage)?;
    let sweep_file = sweep_path(&a.dir, a.setting, ObjectiveArg::Accuracy);
    require_file(&sweep_file)?;
    let (manifest, cache, sets) = load_stage(&a.dir, a.setting)?;
    let out = a.out.clone().unwrap_or_else(|| a.dir.join("report"));
    std::fs::create_dir_all(&out)?;
    let stem = a.setting.stem();
    let full = selection::evaluate_subset(&cache, &sets, &Subset::all(manifest.len()), sim)?;

    // single-component accuracy by kind and by depth
    let sweep = evaluation::read_sweep_csv(&sweep_file)?;
    let means = evaluation::per_kind_means(&sweep)?;
    let mut csv = String::from("kind,mean_accuracy,count\n");
    let mut groups = Vec::new();
    for (kind, mean) in &means {
        let values: Vec<f64> = sweep.iter().filter(|(id, _)| id.kind == *kind).map(|(_, v)| *v).collect();
        csv.push_str(&format!("{},{mean:e},{}\n", kind.name(), values.len()));
        groups.push((kind.name().to_string(), values));
    }
    write_text(&out.join(format!("{stem}.per_kind.csv")), &csv)?;
    write_text(
        &out.join(format!("{stem}.per_kind.svg")),
        &svg::box_plot(&format!("Single-component accuracy by kind ({stem})"), "accuracy", &groups),
    )?;

    let depth = evaluation::depth_profile(&sweep);
    let depth_csv = out.join(format!("{stem}.depth.csv"));
    depth.write_csv(&depth_csv)?;
    wrote(&depth_csv);
    let series = depth
        .kinds
        .iter()
        .map(|&k| svg::Series {
            label: k.name().to_string(),
            points: depth.layers.iter().filter_map(|&l| depth.get(l, k).map(|v| (l as f64, v))).collect(),
            scatter: false,
        })
        .collect();
    let chart = svg::LineChart {
        title: format!("Single-component accuracy by layer ({stem})"),
        x_label: "layer".into(),
        y_label: "accuracy".into(),
        log_x: false,
        series,
        hlines: vec![("full gradient".into(), full)],
    };
    write_text(&out.join(format!("{stem}.depth.svg")), &chart.render())?;

    // greedy traces against random projection on a parameter-fraction axis
    let mut traces = Vec::new();
    for o in [ObjectiveArg::Accuracy, ObjectiveArg::Alignment] {
        let p = trace_path(&a.dir, a.setting, o);
        if p.is_file() {
            traces.push((o, SelectionTrace::read_csv(&p, o.objective(), &manifest)?));
        }
    }
    let mut rp = Vec::new();
    let prefix = format!("{stem}.eval-rp-");
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&a.dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with(&prefix) && n.ends_with(".json"))
        })
        .collect();
    entries.sort();
    for p in entries {
        rp.extend(BenchmarkReport::load_json(&p)?.projection_points);
    }
    if traces.is_empty() && rp.is_empty() {
        emit(json!({"event": "skipped", "what": "curves", "reason": "no greedy traces or projection evaluations"}));
        return Ok(());
    }
    let labelled: Vec<(String, &SelectionTrace)> =
        traces.iter().map(|(o, t)| (format!("greedy ({})", o.name()), t)).collect();
    let bundle = evaluation::compare_curves(&labelled, &rp, full)?;
    write_text(&out.join(format!("{stem}.curves.json")), &bundle.to_json()?)?;
    let chart = svg::LineChart {
        title: format!("Greedy selection vs random projection ({stem})"),
        x_label: "parameter fraction".into(),
        y_label: "accuracy".into(),
        log_x: true,
        series: bundle
            .series
            .iter()
            .map(|s| svg::Series {
                label: s.label.clone(),
                points: s.points.clone(),
                scatter: s.label == "random projection",
            })
            .collect(),
        hlines: vec![("full gradient".into(), full)],
    };
    write_text(&out.join(format!("{stem}.curves.svg")), &chart.render())?;

    for (o, t) in &traces {
        let step = |f: fn(&selection::TraceStep) -> f64| -> Vec<(f64, f64)> {
            t.steps.iter().enumerate().map(|(i, s)| ((i + 1) as f64, f(s))).collect()
        };
        let chart = svg::LineChart {
            title: format!("Greedy trace, {} objective ({stem})", o.name()),
            x_label: "components selected".into(),
            y_label: o.name().into(),
            log_x: false,
            series: vec![
                svg::Series { label: "objective".into(), points: step(|s| s.objective_value), scatter: false },
                svg::Series { label: "best so far".into(), points: step(|s| s.best_so_far), scatter: false },
            ],
            hlines: vec![],
        };
        write_text(&out.join(format!("{stem}.greedy-{}.svg", o.name())), &chart.render())?;
    }
    Ok(())
}
