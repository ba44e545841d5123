use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use log::info;

use sensemap::clustering::{CentroidUpdate, ClusterParams, Linkage};
use sensemap::corpus::{load_dataset, save_predictions, DatasetFormat};
use sensemap::embedding::{load_table, EmbeddingKind};
use sensemap::mapping::{ClusterScope, GlossAssignment};
use sensemap::pipeline::{
    self, Averaging, BackendKind, ConfigOverrides, GenerationConfig, PipelineConfig, CLUSTERS_FILE,
    DEFINITIONS_FILE, GRAPHS_FILE, MAPPING_FILE, PREDICTIONS_FILE,
};
use sensemap::Error;

/// Sense clustering, dictionary mapping and definition generation for
/// diachronic word usages.
///
/// Exit codes: 0 success, 1 input error (missing or malformed files,
/// inconsistent data, bad flags), 2 runtime error.
#[derive(Parser)]
#[command(name = "sensemap", version)]
struct Cli {
    /// Only print warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cluster the usages of every lemma; writes clusters.json.
    Cluster(ClusterArgs),
    /// Build semantic graphs from clusters.json; writes graphs.json and DOT files.
    Graph(GraphArgs),
    /// Map clusters to dictionary glosses; writes predictions.tsv and mapping.json.
    Map(MapArgs),
    /// Generate definitions for novel senses; writes definitions.jsonl.
    Generate(GenerateArgs),
    /// Score predictions (and optionally definitions) against gold data.
    Evaluate(EvaluateArgs),
    /// Run cluster, map, graph and generate from a config file.
    Pipeline(PipelineArgs),
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset (.tsv or .jsonl).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Worker threads for per-lemma work [default: all cores].
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct ClusterArgs {
    #[command(flatten)]
    common: Common,
    /// Vocabulary (word) embedding table.
    #[arg(long)]
    word_embeddings: Option<PathBuf>,
    /// Usage embedding table.
    #[arg(long)]
    usage_embeddings: Option<PathBuf>,
    /// Merge threshold on the neighbor distance (required here or in the config).
    #[arg(long)]
    t_sc: Option<f64>,
    /// Nearest neighbors per centre [default: 5].
    #[arg(long)]
    k: Option<usize>,
    /// Which usages are clustered: all-usages or new-only [default: all-usages].
    #[arg(long)]
    scope: Option<ClusterScope>,
    /// Merged-centre update: midpoint or size-weighted [default: midpoint].
    #[arg(long)]
    centroid_update: Option<CentroidUpdate>,
    /// Cluster distance: centroid or average-usage [default: centroid].
    #[arg(long)]
    linkage: Option<Linkage>,
    /// Keep the target lemma in neighbor lists.
    #[arg(long)]
    keep_lemma: bool,
}

#[derive(Args)]
struct GraphArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    word_embeddings: Option<PathBuf>,
    #[arg(long)]
    usage_embeddings: Option<PathBuf>,
    /// Clusters file [default: <output-dir>/clusters.json].
    #[arg(long)]
    clusters: Option<PathBuf>,
}

#[derive(Args)]
struct MapArgs {
    #[command(flatten)]
    common: Common,
    /// Gloss embedding table.
    #[arg(long)]
    gloss_embeddings: Option<PathBuf>,
    /// Clusters file [default: <output-dir>/clusters.json].
    #[arg(long)]
    clusters: Option<PathBuf>,
    /// Minimum centroid-gloss cosine for a match [default: 0.5].
    #[arg(long)]
    sim_threshold: Option<f64>,
    /// argmax or all-above-threshold [default: argmax].
    #[arg(long)]
    assignment: Option<GlossAssignment>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    /// Predictions TSV [default: <output-dir>/predictions.tsv].
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// graphs.json whose neighbor words feed the stub backend.
    #[arg(long)]
    graphs: Option<PathBuf>,
    /// stub (offline, deterministic) or http [default: stub].
    #[arg(long)]
    backend: Option<BackendKind>,
    /// Chat-completions URL for the http backend.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Concurrent requests [default: 4].
    #[arg(long)]
    in_flight: Option<usize>,
    #[arg(long)]
    max_retries: Option<u32>,
    /// Per-request timeout in seconds.
    #[arg(long)]
    timeout: Option<f64>,
    /// Environment variable holding the API key [default: SENSEMAP_API_KEY].
    #[arg(long)]
    api_key_env: Option<String>,
    /// Prompt template (TOML) instead of the built-in per-language ones.
    #[arg(long)]
    template: Option<PathBuf>,
    /// Use this language's built-in template for every lemma.
    #[arg(long)]
    language: Option<String>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Predictions TSV.
    #[arg(long)]
    predictions: PathBuf,
    /// Dataset with gold sense ids for NEW-period usages.
    #[arg(long)]
    gold: PathBuf,
    /// Generated definitions (JSONL) to score with BLEU.
    #[arg(long)]
    definitions: Option<PathBuf>,
    /// Token vectors (JSONL) of definitions and references, for the embedding F1.
    #[arg(long)]
    token_vectors: Option<PathBuf>,
    /// per-lemma or pooled.
    #[arg(long, default_value = "per-lemma")]
    averaging: Averaging,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    /// TOML config file.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    t_sc: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    sim_threshold: Option<f64>,
    #[arg(long)]
    scope: Option<ClusterScope>,
    #[arg(long)]
    backend: Option<BackendKind>,
    #[arg(long)]
    language: Option<String>,
    /// Stop after Subtask 1 outputs and graphs.
    #[arg(long)]
    skip_generate: bool,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn load_config(common: &Common, overrides: ConfigOverrides) -> CliResult<Option<PipelineConfig>> {
    match &common.config {
        Some(p) => Ok(Some(PipelineConfig::load(p, &overrides)?)),
        None => Ok(None),
    }
}

fn pick(flag: &Option<PathBuf>, cfg: &Option<PipelineConfig>, from_cfg: fn(&PipelineConfig) -> &PathBuf, name: &str) -> CliResult<PathBuf> {
    flag.clone()
        .or_else(|| cfg.as_ref().map(|c| from_cfg(c).clone()))
        .ok_or_else(|| Failure::Usage(format!("--{name} is required (or give --config)")))
}

fn jobs(common: &Common, cfg: &Option<PipelineConfig>) -> usize {
    common
        .jobs
        .or_else(|| cfg.as_ref().and_then(|c| c.jobs))
        .unwrap_or_else(pipeline::default_jobs)
}

fn create_dir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Core(Error::Io { path: dir.into(), source: e }))
}

fn dataset(path: &Path) -> CliResult<Vec<sensemap::corpus::TargetWord>> {
    Ok(load_dataset(path, DatasetFormat::from_path(path))?)
}

fn cmd_cluster(a: ClusterArgs) -> CliResult {
    let cfg = load_config(
        &a.common,
        ConfigOverrides {
            t_sc: a.t_sc,
            k: a.k,
            ..Default::default()
        },
    )?;
    let mut params = match (&cfg, a.t_sc) {
        (Some(c), _) => c.clustering.clone(),
        (None, Some(t)) => ClusterParams::new(t),
        (None, None) => return Err(Failure::Usage("--t-sc is required (or give --config)".into())),
    };
    if let Some(k) = a.k {
        params.k = k;
    }
    if let Some(u) = a.centroid_update {
        params.centroid_update = u;
    }
    if let Some(l) = a.linkage {
        params.linkage = l;
    }
    if a.keep_lemma {
        params.exclude_lemma = false;
    }
    params.validate()?;
    let scope = a
        .scope
        .or_else(|| cfg.as_ref().map(|c| c.mapping.scope))
        .unwrap_or_default();
    let out = pick(&a.common.output_dir, &cfg, |c| &c.output_dir, "output-dir")?;
    let jobs = jobs(&a.common, &cfg);
    info!("clustering: {params} scope={scope:?} jobs={jobs}");

    let ds = dataset(&pick(&a.common.dataset, &cfg, |c| &c.dataset, "dataset")?)?;
    let words = load_table(&pick(&a.word_embeddings, &cfg, |c| &c.word_embeddings, "word-embeddings")?, EmbeddingKind::Word)?;
    let usages = load_table(&pick(&a.usage_embeddings, &cfg, |c| &c.usage_embeddings, "usage-embeddings")?, EmbeddingKind::Usage)?;
    let clusters = pipeline::cluster_all(&ds, &words, &usages, &params, scope, jobs)?;
    create_dir(&out)?;
    let path = out.join(CLUSTERS_FILE);
    pipeline::save_clusters(&clusters, &path)?;
    info!(
        "{} lemmas, {} clusters -> {}",
        clusters.len(),
        clusters.iter().map(|c| c.len()).sum::<usize>(),
        path.display()
    );
    Ok(())
}

fn cmd_graph(a: GraphArgs) -> CliResult {
    let cfg = load_config(&a.common, ConfigOverrides::default())?;
    let out = pick(&a.common.output_dir, &cfg, |c| &c.output_dir, "output-dir")?;
    let clusters_path = a.clusters.clone().unwrap_or_else(|| out.join(CLUSTERS_FILE));
    let jobs = jobs(&a.common, &cfg);
    info!("graph: clusters={} jobs={jobs}", clusters_path.display());

    let ds = dataset(&pick(&a.common.dataset, &cfg, |c| &c.dataset, "dataset")?)?;
    let words = load_table(&pick(&a.word_embeddings, &cfg, |c| &c.word_embeddings, "word-embeddings")?, EmbeddingKind::Word)?;
    let usages = load_table(&pick(&a.usage_embeddings, &cfg, |c| &c.usage_embeddings, "usage-embeddings")?, EmbeddingKind::Usage)?;
    let clusters = pipeline::load_clusters(&clusters_path)?;
    let graphs = pipeline::graph_all(&ds, &clusters, &words, &usages, jobs)?;
    create_dir(&out)?;
    let written = pipeline::save_graphs(&graphs, &out)?;
    info!("{} graphs -> {}", graphs.len(), out.join(GRAPHS_FILE).display());
    log::debug!("wrote {written:?}");
    Ok(())
}

fn cmd_map(a: MapArgs) -> CliResult {
    let cfg = load_config(
        &a.common,
        ConfigOverrides {
            sim_threshold: a.sim_threshold,
            ..Default::default()
        },
    )?;
    let mut params = cfg.as_ref().map(|c| c.mapping.clone()).unwrap_or_default();
    if let Some(t) = a.sim_threshold {
        params.sim_threshold = t;
    }
    if let Some(g) = a.assignment {
        params.assignment = g;
    }
    params.validate()?;
    let out = pick(&a.common.output_dir, &cfg, |c| &c.output_dir, "output-dir")?;
    let clusters_path = a.clusters.clone().unwrap_or_else(|| out.join(CLUSTERS_FILE));
    info!("mapping: {params}");

    let ds = dataset(&pick(&a.common.dataset, &cfg, |c| &c.dataset, "dataset")?)?;
    let glosses = load_table(&pick(&a.gloss_embeddings, &cfg, |c| &c.gloss_embeddings, "gloss-embeddings")?, EmbeddingKind::Gloss)?;
    let clusters = pipeline::load_clusters(&clusters_path)?;
    let (preds, report) = pipeline::map_all(&ds, &clusters, &glosses, &params)?;
    create_dir(&out)?;
    save_predictions(&preds, &out.join(PREDICTIONS_FILE))?;
    pipeline::save_mapping_report(&report, &out.join(MAPPING_FILE))?;
    info!("{} predictions -> {}", preds.len(), out.join(PREDICTIONS_FILE).display());
    Ok(())
}

fn report_generation(outcome: &sensemap::defgen::ResumeOutcome, path: &Path) -> CliResult {
    info!(
        "{} definitions generated, {} reused -> {}",
        outcome.batch.generated.len(),
        outcome.reused.len(),
        path.display()
    );
    if outcome.batch.failures.is_empty() {
        return Ok(());
    }
    for (id, e) in &outcome.batch.failures {
        log::error!("{id}: {e}");
    }
    let ids: Vec<&str> = outcome.batch.failures.iter().map(|(id, _)| id.as_str()).collect();
    Err(Failure::Core(Error::Runtime(format!(
        "{} definition(s) failed ({}); rerun to retry only these",
        ids.len(),
        ids.join(", ")
    ))))
}

fn cmd_generate(a: GenerateArgs) -> CliResult {
    let cfg = load_config(
        &a.common,
        ConfigOverrides {
            backend: a.backend,
            ..Default::default()
        },
    )?;
    let mut gen: GenerationConfig = cfg.as_ref().map(|c| c.generation.clone()).unwrap_or_default();
    if let Some(b) = a.backend {
        gen.backend = b;
    }
    let s = &mut gen.settings;
    if let Some(v) = &a.endpoint {
        s.endpoint = v.clone();
    }
    if let Some(v) = &a.model {
        s.model = v.clone();
    }
    if let Some(v) = a.temperature {
        s.temperature = v;
    }
    if let Some(v) = a.in_flight {
        s.in_flight = v;
    }
    if let Some(v) = a.max_retries {
        s.max_retries = v;
    }
    if let Some(v) = a.timeout {
        s.timeout = Duration::try_from_secs_f64(v).map_err(|e| Failure::Usage(format!("--timeout: {e}")))?;
    }
    if let Some(v) = &a.api_key_env {
        s.api_key_env = v.clone();
    }
    if a.template.is_some() {
        gen.template = a.template.clone();
    }
    gen.settings.validate()?;
    let language = a.language.clone().or_else(|| cfg.as_ref().and_then(|c| c.language.clone()));
    let out = pick(&a.common.output_dir, &cfg, |c| &c.output_dir, "output-dir")?;
    let preds = a.predictions.clone().unwrap_or_else(|| out.join(PREDICTIONS_FILE));
    info!(
        "generation: backend={:?} model={} endpoint={} temperature={} in_flight={} max_retries={} timeout={:?} language={}",
        gen.backend,
        gen.settings.model,
        gen.settings.endpoint,
        gen.settings.temperature,
        gen.settings.in_flight,
        gen.settings.max_retries,
        gen.settings.timeout,
        language.as_deref().unwrap_or("per lemma"),
    );
    let dataset_path = pick(&a.common.dataset, &cfg, |c| &c.dataset, "dataset")?;
    let path = out.join(DEFINITIONS_FILE);
    let outcome = pipeline::run_generation(&dataset_path, &preds, a.graphs.as_deref(), &gen, language.as_deref(), &path)?;
    report_generation(&outcome, &path)
}

fn cmd_evaluate(a: EvaluateArgs) -> CliResult {
    info!("evaluation: averaging={:?}", a.averaging);
    let report = pipeline::run_evaluate(
        &a.predictions,
        &a.gold,
        a.definitions.as_deref(),
        a.token_vectors.as_deref(),
        a.averaging,
    )?;
    match &a.out {
        Some(p) => pipeline::save_report(&report, p)?,
        None => print!("{}", report.to_json()),
    }
    Ok(())
}

fn cmd_pipeline(a: PipelineArgs) -> CliResult {
    let overrides = ConfigOverrides {
        t_sc: a.t_sc,
        k: a.k,
        sim_threshold: a.sim_threshold,
        scope: a.scope,
        jobs: a.jobs,
        backend: a.backend,
        language: a.language.clone(),
        output_dir: a.output_dir.clone(),
    };
    let cfg = PipelineConfig::load(&a.config, &overrides)?;
    info!("effective configuration (jobs={}):\n{}", cfg.jobs(), cfg.to_toml());
    let summary = pipeline::run_subtask1(&cfg)?;
    info!(
        "subtask 1: {} lemmas, {} clusters, {} predictions, {} novel senses",
        summary.lemmas, summary.clusters, summary.predictions, summary.novel_senses
    );
    pipeline::run_graphs(&cfg)?;
    if a.skip_generate {
        return Ok(());
    }
    let outcome = pipeline::run_subtask2(
        &cfg,
        &cfg.output_dir.join(PREDICTIONS_FILE),
        Some(&cfg.output_dir.join(GRAPHS_FILE)),
    )?;
    report_generation(&outcome, &cfg.output_dir.join(DEFINITIONS_FILE))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let result = match cli.command {
        Command::Cluster(a) => cmd_cluster(a),
        Command::Graph(a) => cmd_graph(a),
        Command::Map(a) => cmd_map(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Pipeline(a) => cmd_pipeline(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 1 } else { 2 })
        }
    }
}
