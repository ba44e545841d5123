//! Stage orchestration over files: clustering, graphs, sense mapping,
//! definition generation and evaluation. Stages only communicate through
//! the files named by the constants below, so each can be rerun alone.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{cluster_usages, ClusterParams, ClusterSet};
use crate::corpus::{load_dataset, load_predictions, save_predictions, DatasetFormat, Period, TargetWord};
use crate::defgen::{
    collect_novel_usages, generate_to_file, load_definitions, Backend, DefinitionRecord, GenerationRequest,
    GenerationSettings, HttpBackend, PromptTemplate, ResumeOutcome, StubBackend, Templates,
};
use crate::embedding::{load_table, EmbeddingKind, EmbeddingTable, TokenVectors};
use crate::error::{Error, Result};
use crate::graph::{build_graph, SemanticGraph};
use crate::mapping::{clustering_inputs, map_clusters, ClusterScope, LemmaMapping, MappingParams, SensePrediction};
use crate::metrics::{
    ari, ari_restricted, bleu, greedy_match_score, macro_f1, DefinitionPair, LabeledPair, Restriction, BLEU_MAX_N,
};

pub const CLUSTERS_FILE: &str = "clusters.json";
pub const PREDICTIONS_FILE: &str = "predictions.tsv";
pub const MAPPING_FILE: &str = "mapping.json";
pub const GRAPHS_FILE: &str = "graphs.json";
pub const GRAPH_DIR: &str = "graphs";
pub const DEFINITIONS_FILE: &str = "definitions.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Stub,
    Http,
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "stub" => Ok(Self::Stub),
            "http" => Ok(Self::Http),
            other => Err(format!("unknown backend `{other}`, expected stub or http")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    #[serde(default)]
    pub backend: BackendKind,
    /// Custom prompt template; built-in per-language templates otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<PathBuf>,
    #[serde(flatten)]
    pub settings: GenerationSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Forces one prompt language; otherwise each lemma's own language.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language: Option<String>,
    pub dataset: PathBuf,
    pub word_embeddings: PathBuf,
    pub usage_embeddings: PathBuf,
    pub gloss_embeddings: PathBuf,
    pub output_dir: PathBuf,
    /// Worker threads for per-lemma work; all cores when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jobs: Option<usize>,
    pub clustering: ClusterParams,
    #[serde(default)]
    pub mapping: MappingParams,
    #[serde(default)]
    pub generation: GenerationConfig,
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct ConfigOverrides {
    pub t_sc: Option<f64>,
    pub k: Option<usize>,
    pub sim_threshold: Option<f64>,
    pub scope: Option<ClusterScope>,
    pub jobs: Option<usize>,
    pub backend: Option<BackendKind>,
    pub language: Option<String>,
    pub output_dir: Option<PathBuf>,
}

fn set_key(table: &mut toml::Table, section: Option<&str>, key: &str, value: toml::Value) {
    let target = match section {
        Some(s) => {
            let entry = table
                .entry(s.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            match entry {
                toml::Value::Table(t) => t,
                other => {
                    *other = toml::Value::Table(toml::Table::new());
                    other.as_table_mut().expect("just replaced")
                }
            }
        }
        None => table,
    };
    target.insert(key.to_string(), value);
}

impl PipelineConfig {
    /// Parse a TOML config; relative paths are resolved against `base_dir`.
    pub fn from_toml_str(src: &str, base_dir: &Path, overrides: &ConfigOverrides) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(src).map_err(|e| Error::Invalid(format!("config: {e}")))?;
        if let Some(t) = overrides.t_sc {
            set_key(&mut table, Some("clustering"), "t_sc", toml::Value::Float(t));
        }
        if let Some(k) = overrides.k {
            set_key(&mut table, Some("clustering"), "k", toml::Value::Integer(k as i64));
        }
        if let Some(s) = overrides.sim_threshold {
            set_key(&mut table, Some("mapping"), "sim_threshold", toml::Value::Float(s));
        }
        if let Some(j) = overrides.jobs {
            set_key(&mut table, None, "jobs", toml::Value::Integer(j as i64));
        }
        if let Some(l) = &overrides.language {
            set_key(&mut table, None, "language", toml::Value::String(l.clone()));
        }
        let mut cfg: PipelineConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Invalid(format!("config: {}", e.message())))?;
        if let Some(scope) = overrides.scope {
            cfg.mapping.scope = scope;
        }
        if let Some(b) = overrides.backend {
            cfg.generation.backend = b;
        }
        for p in [
            &mut cfg.dataset,
            &mut cfg.word_embeddings,
            &mut cfg.usage_embeddings,
            &mut cfg.gloss_embeddings,
            &mut cfg.output_dir,
        ] {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        }
        if let Some(t) = &mut cfg.generation.template {
            if t.is_relative() {
                *t = base_dir.join(&*t);
            }
        }
        if let Some(dir) = &overrides.output_dir {
            cfg.output_dir = dir.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &ConfigOverrides) -> Result<Self> {
        let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&src, base, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.clustering.validate()?;
        self.mapping.validate()?;
        self.generation.settings.validate()?;
        if self.jobs == Some(0) {
            return Err(Error::Invalid("jobs must be at least 1".into()));
        }
        Ok(())
    }

    pub fn jobs(&self) -> usize {
        self.jobs.unwrap_or_else(default_jobs)
    }

    /// Effective settings, defaults included, as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_else(|e| format!("# unprintable config: {e}\n"))
    }
}

pub fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Run `f` on every lemma on a pool of `jobs` threads. Results keep the
/// input order and the first error in that order is returned, so the
/// outcome does not depend on `jobs`.
fn per_lemma<'a, T, F>(jobs: usize, targets: &'a [TargetWord], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&'a TargetWord) -> Result<T> + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Runtime(format!("thread pool: {e}")))?;
    let results: Vec<Result<T>> = pool.install(|| targets.par_iter().map(&f).collect());
    results.into_iter().collect()
}

fn check_dims(tables: &[&EmbeddingTable]) -> Result<()> {
    if let Some(first) = tables.first() {
        for t in &tables[1..] {
            if t.dim() != first.dim() {
                return Err(Error::DimensionMismatch {
                    expected: first.dim(),
                    found: t.dim(),
                });
            }
        }
    }
    Ok(())
}

/// Cluster every lemma. Lemmas without usages in `scope` are skipped.
pub fn cluster_all(
    dataset: &[TargetWord],
    words: &EmbeddingTable,
    usages: &EmbeddingTable,
    params: &ClusterParams,
    scope: ClusterScope,
    jobs: usize,
) -> Result<Vec<ClusterSet>> {
    check_dims(&[words, usages])?;
    let sets = per_lemma(jobs, dataset, |t| {
        let inputs = clustering_inputs(t, usages, scope).map_err(|e| e.at_stage(&t.lemma, "cluster"))?;
        if inputs.is_empty() {
            log::warn!("lemma `{}` has no usages to cluster, skipped", t.lemma);
            return Ok(None);
        }
        cluster_usages(&t.lemma, &inputs, words, params)
            .map(Some)
            .map_err(|e| e.at_stage(&t.lemma, "cluster"))
    })?;
    Ok(sets.into_iter().flatten().collect())
}

fn targets_by_lemma(dataset: &[TargetWord]) -> HashMap<&str, &TargetWord> {
    dataset.iter().map(|t| (t.lemma.as_str(), t)).collect()
}

fn target_for<'a>(by_lemma: &HashMap<&str, &'a TargetWord>, lemma: &str) -> Result<&'a TargetWord> {
    by_lemma
        .get(lemma)
        .copied()
        .ok_or_else(|| Error::Invalid(format!("clusters refer to lemma `{lemma}` missing from the dataset")))
}

pub fn map_all(
    dataset: &[TargetWord],
    clusters: &[ClusterSet],
    glosses: &EmbeddingTable,
    params: &MappingParams,
) -> Result<(Vec<SensePrediction>, Vec<LemmaMapping>)> {
    let by_lemma = targets_by_lemma(dataset);
    let mut preds = Vec::new();
    let mut reports = Vec::with_capacity(clusters.len());
    for cs in clusters {
        let target = target_for(&by_lemma, &cs.lemma)?;
        let (p, r) = map_clusters(target, cs, glosses, params).map_err(|e| e.at_stage(&cs.lemma, "map"))?;
        preds.extend(p);
        reports.push(r);
    }
    Ok((preds, reports))
}

pub fn graph_all(
    dataset: &[TargetWord],
    clusters: &[ClusterSet],
    words: &EmbeddingTable,
    usages: &EmbeddingTable,
    jobs: usize,
) -> Result<Vec<SemanticGraph>> {
    check_dims(&[words, usages])?;
    let by_lemma = targets_by_lemma(dataset);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Runtime(format!("thread pool: {e}")))?;
    let results: Vec<Result<SemanticGraph>> = pool.install(|| {
        clusters
            .par_iter()
            .map(|cs| {
                let target = target_for(&by_lemma, &cs.lemma)?;
                let all = clustering_inputs(target, usages, ClusterScope::AllUsages)
                    .map_err(|e| e.at_stage(&cs.lemma, "graph"))?;
                build_graph(cs, &all, words, cs.params.k).map_err(|e| e.at_stage(&cs.lemma, "graph"))
            })
            .collect()
    });
    results.into_iter().collect()
}

fn write_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<()> {
    let mut body = serde_json::to_string_pretty(value).map_err(|e| Error::Invalid(e.to_string()))?;
    body.push('\n');
    crate::corpus::write_atomic(path, body.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&src).map_err(|e| Error::parse(path, e.line() as u64, e.to_string()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn save_clusters(clusters: &[ClusterSet], path: &Path) -> Result<()> {
    write_json(clusters, path)
}

pub fn load_clusters(path: &Path) -> Result<Vec<ClusterSet>> {
    read_json(path)
}

pub fn save_mapping_report(report: &[LemmaMapping], path: &Path) -> Result<()> {
    write_json(report, path)
}

pub fn load_graphs(path: &Path) -> Result<Vec<SemanticGraph>> {
    read_json(path)
}

/// File stem for a lemma's DOT file: characters outside `[A-Za-z0-9_-]`
/// (other than letters of any script) become `_`.
fn dot_stem(lemma: &str) -> String {
    let s: String = lemma
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    if s.is_empty() {
        "_".into()
    } else {
        s
    }
}

/// Write `graphs.json` into `dir` and one DOT file per lemma into
/// `dir/graphs/`. Returns the written paths.
pub fn save_graphs(graphs: &[SemanticGraph], dir: &Path) -> Result<Vec<PathBuf>> {
    let dot_dir = dir.join(GRAPH_DIR);
    create_dir(&dot_dir)?;
    let mut written = vec![dir.join(GRAPHS_FILE)];
    write_json(graphs, &written[0])?;
    let mut used = BTreeSet::new();
    for g in graphs {
        let stem = dot_stem(&g.root.lemma);
        let mut name = format!("{stem}.dot");
        let mut n = 2;
        while !used.insert(name.clone()) {
            name = format!("{stem}-{n}.dot");
            n += 1;
        }
        let path = dot_dir.join(name);
        crate::graph::export_dot(g, &path)?;
        written.push(path);
    }
    Ok(written)
}

pub fn load_inputs(
    dataset: &Path,
    tables: &[(&Path, EmbeddingKind)],
) -> Result<(Vec<TargetWord>, Vec<EmbeddingTable>)> {
    let data = load_dataset(dataset, DatasetFormat::from_path(dataset))?;
    let loaded = tables
        .iter()
        .map(|(p, k)| load_table(p, *k))
        .collect::<Result<Vec<_>>>()?;
    check_dims(&loaded.iter().collect::<Vec<_>>())?;
    Ok((data, loaded))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Subtask1Summary {
    pub lemmas: usize,
    pub clusters: usize,
    pub predictions: usize,
    pub novel_senses: usize,
    pub written: Vec<PathBuf>,
}

/// Load → cluster → map → write `clusters.json`, `predictions.tsv` and
/// `mapping.json`. Nothing is written unless every stage succeeds.
pub fn run_subtask1(cfg: &PipelineConfig) -> Result<Subtask1Summary> {
    cfg.validate()?;
    let (dataset, tables) = load_inputs(
        &cfg.dataset,
        &[
            (&cfg.word_embeddings, EmbeddingKind::Word),
            (&cfg.usage_embeddings, EmbeddingKind::Usage),
            (&cfg.gloss_embeddings, EmbeddingKind::Gloss),
        ],
    )?;
    let (words, usages, glosses) = (&tables[0], &tables[1], &tables[2]);
    let clusters = cluster_all(&dataset, words, usages, &cfg.clustering, cfg.mapping.scope, cfg.jobs())?;
    let (preds, report) = map_all(&dataset, &clusters, glosses, &cfg.mapping)?;

    create_dir(&cfg.output_dir)?;
    let written = vec![
        cfg.output_dir.join(CLUSTERS_FILE),
        cfg.output_dir.join(PREDICTIONS_FILE),
        cfg.output_dir.join(MAPPING_FILE),
    ];
    save_clusters(&clusters, &written[0])?;
    save_predictions(&preds, &written[1])?;
    save_mapping_report(&report, &written[2])?;
    let novel: BTreeSet<&str> = preds
        .iter()
        .filter(|p| p.is_novel)
        .map(|p| p.predicted_sense_id.as_str())
        .collect();
    Ok(Subtask1Summary {
        lemmas: dataset.len(),
        clusters: clusters.iter().map(ClusterSet::len).sum(),
        predictions: preds.len(),
        novel_senses: novel.len(),
        written,
    })
}

/// Build semantic graphs from `clusters.json` and write them next to it.
pub fn run_graphs(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let (dataset, tables) = load_inputs(
        &cfg.dataset,
        &[
            (&cfg.word_embeddings, EmbeddingKind::Word),
            (&cfg.usage_embeddings, EmbeddingKind::Usage),
        ],
    )?;
    let clusters = load_clusters(&cfg.output_dir.join(CLUSTERS_FILE))?;
    let graphs = graph_all(&dataset, &clusters, &tables[0], &tables[1], cfg.jobs())?;
    save_graphs(&graphs, &cfg.output_dir)
}

/// One request per novel sense. Graph neighbors, when graphs are given,
/// come from the cluster holding the sense's first usage.
pub fn build_requests(
    preds: &[SensePrediction],
    dataset: &[TargetWord],
    graphs: Option<&[SemanticGraph]>,
) -> Result<Vec<GenerationRequest>> {
    let by_lemma = targets_by_lemma(dataset);
    let groups = collect_novel_usages(preds, dataset)?;
    Ok(groups
        .values()
        .map(|g| {
            let language = by_lemma.get(g.lemma.as_str()).map_or("", |t| t.language.as_str());
            let mut req = GenerationRequest::from_group(g, language);
            if let Some(graph) = graphs.and_then(|gs| gs.iter().find(|x| x.root.lemma == g.lemma)) {
                if let Some(words) = g.usage_ids.first().and_then(|u| graph.neighbors_of_usage(u)) {
                    req.neighbor_words = words.into_iter().map(str::to_string).collect();
                }
            }
            req
        })
        .collect())
}

pub fn make_backend(gen: &GenerationConfig) -> Result<Box<dyn Backend>> {
    Ok(match gen.backend {
        BackendKind::Stub => Box::new(StubBackend),
        BackendKind::Http => Box::new(HttpBackend::from_env(&gen.settings)?),
    })
}

pub fn make_templates(gen: &GenerationConfig, language: Option<&str>, dataset: &[TargetWord]) -> Result<Templates> {
    if let Some(path) = &gen.template {
        return Ok(Templates::single(PromptTemplate::load(path)?));
    }
    if let Some(lang) = language {
        return Ok(Templates::single(PromptTemplate::builtin(lang)?));
    }
    let langs: BTreeSet<&str> = dataset.iter().map(|t| t.language.as_str()).collect();
    Templates::builtin_for(langs)
}

/// Collect novel usages from `preds_path` and generate definitions into
/// `out_path`, reusing definitions that are already there.
pub fn run_generation(
    dataset_path: &Path,
    preds_path: &Path,
    graphs_path: Option<&Path>,
    gen: &GenerationConfig,
    language: Option<&str>,
    out_path: &Path,
) -> Result<ResumeOutcome> {
    gen.settings.validate()?;
    let dataset = load_dataset(dataset_path, DatasetFormat::from_path(dataset_path))?;
    let preds = load_predictions(preds_path)?;
    let graphs = graphs_path.map(load_graphs).transpose()?;
    let requests = build_requests(&preds, &dataset, graphs.as_deref())?;
    let templates = make_templates(gen, language, &dataset)?;
    let backend = make_backend(gen)?;
    if let Some(dir) = out_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    generate_to_file(out_path, &requests, &templates, backend.as_ref(), &gen.settings)
}

/// [`run_generation`] with the config's dataset, writing
/// `definitions.jsonl` into the output directory.
pub fn run_subtask2(cfg: &PipelineConfig, preds_path: &Path, graphs_path: Option<&Path>) -> Result<ResumeOutcome> {
    run_generation(
        &cfg.dataset,
        preds_path,
        graphs_path,
        &cfg.generation,
        cfg.language.as_deref(),
        &cfg.output_dir.join(DEFINITIONS_FILE),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Score each lemma, then average over the lemmas where the metric is
    /// defined.
    #[default]
    PerLemma,
    /// Score all usages of all lemmas as one pool.
    Pooled,
}

impl FromStr for Averaging {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "per_lemma" | "per-lemma" => Ok(Self::PerLemma),
            "pooled" | "global" => Ok(Self::Pooled),
            other => Err(format!("unknown averaging `{other}`, expected per-lemma or pooled")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub lemmas: usize,
    pub usages: usize,
    /// `None` where too few usages make a metric undefined everywhere.
    pub ari: Option<f64>,
    pub ari_new: Option<f64>,
    pub ari_old: Option<f64>,
    pub macro_f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub definitions: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bleu_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embed_f1_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub averaging: Averaging,
    pub overall: MetricSummary,
    pub per_language: BTreeMap<String, MetricSummary>,
}

const MAX_LISTED_OFFENDERS: usize = 10;

/// One prediction per usage: with several rows (multi-gloss assignment)
/// the most similar one is used, ties to the smaller sense id.
fn best_predictions(preds: &[SensePrediction]) -> BTreeMap<&str, &SensePrediction> {
    let mut best: BTreeMap<&str, &SensePrediction> = BTreeMap::new();
    for p in preds {
        best.entry(p.usage_id.as_str())
            .and_modify(|cur| {
                let better = p.similarity > cur.similarity
                    || (p.similarity == cur.similarity && p.predicted_sense_id < cur.predicted_sense_id)
                    || (cur.similarity.is_nan() && !p.similarity.is_nan());
                if better {
                    *cur = p;
                }
            })
            .or_insert(p);
    }
    best
}

/// Pair every gold-annotated NEW usage with its prediction, per lemma. The
/// usage ids (and lemmas) of both sides must agree exactly.
pub fn gold_pairs(dataset: &[TargetWord], preds: &[SensePrediction]) -> Result<BTreeMap<String, Vec<LabeledPair>>> {
    let best = best_predictions(preds);
    let mut offenders = BTreeSet::new();
    let mut missing_gold = Vec::new();
    let mut gold_ids = BTreeSet::new();
    let mut out = BTreeMap::new();
    for t in dataset {
        let mut pairs = Vec::new();
        for u in t.new_usages() {
            let Some(gold) = &u.gold_sense_id else {
                missing_gold.push(u.usage_id.clone());
                continue;
            };
            gold_ids.insert(u.usage_id.as_str());
            match best.get(u.usage_id.as_str()) {
                Some(p) if p.lemma == t.lemma => pairs.push(LabeledPair {
                    usage_id: u.usage_id.clone(),
                    gold_sense_id: gold.clone(),
                    pred_sense_id: p.predicted_sense_id.clone(),
                    gold_is_novel: !t.has_gloss(gold),
                }),
                _ => {
                    offenders.insert(u.usage_id.clone());
                }
            }
        }
        if !pairs.is_empty() {
            out.insert(t.lemma.clone(), pairs);
        }
    }
    if !missing_gold.is_empty() {
        return Err(Error::Invalid(format!(
            "{} NEW-period usage(s) lack a gold sense id, first: {}",
            missing_gold.len(),
            missing_gold.iter().take(MAX_LISTED_OFFENDERS).cloned().collect::<Vec<_>>().join(", ")
        )));
    }
    offenders.extend(
        best.keys()
            .filter(|u| !gold_ids.contains(*u))
            .map(|u| u.to_string()),
    );
    if !offenders.is_empty() {
        return Err(Error::UsageMismatch {
            count: offenders.len(),
            first: offenders.into_iter().take(MAX_LISTED_OFFENDERS).collect(),
        });
    }
    Ok(out)
}

fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::TooFewItems { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

type Scorer = fn(&[LabeledPair]) -> Result<f64>;

const SCORERS: [Scorer; 4] = [
    ari,
    |p| ari_restricted(p, Restriction::NewSenses),
    |p| ari_restricted(p, Restriction::OldSenses),
    macro_f1,
];

fn summarize(groups: &[&Vec<LabeledPair>], averaging: Averaging) -> Result<MetricSummary> {
    let mut scores = [None; 4];
    for (slot, scorer) in scores.iter_mut().zip(SCORERS) {
        *slot = match averaging {
            Averaging::PerLemma => {
                let mut vals = Vec::new();
                for g in groups {
                    if let Some(v) = defined(scorer(g))? {
                        vals.push(v);
                    }
                }
                mean(&vals)
            }
            Averaging::Pooled => {
                let all: Vec<LabeledPair> = groups.iter().flat_map(|g| g.iter().cloned()).collect();
                defined(scorer(&all))?
            }
        };
    }
    Ok(MetricSummary {
        lemmas: groups.len(),
        usages: groups.iter().map(|g| g.len()).sum(),
        ari: scores[0],
        ari_new: scores[1],
        ari_old: scores[2],
        macro_f1: scores[3],
        ..Default::default()
    })
}

/// Score of one generated definition against its reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefinitionScore {
    pub novel_sense_id: String,
    pub lemma: String,
    pub reference_sense_id: String,
    pub bleu: f64,
    pub embed_f1: Option<f64>,
}

/// The reference of a generated definition is the gold gloss with the same
/// id when there is one; otherwise the definition of the gold sense most
/// frequent among the usages predicted into it (ties to the smaller id).
pub fn score_definitions(
    dataset: &[TargetWord],
    preds: &[SensePrediction],
    defs: &[DefinitionRecord],
    tokens: Option<&TokenVectors>,
) -> Result<Vec<DefinitionScore>> {
    let by_lemma = targets_by_lemma(dataset);
    let best = best_predictions(preds);
    let mut gold_of_pred: HashMap<&str, BTreeMap<&str, usize>> = HashMap::new();
    for t in dataset {
        for u in t.usages.iter().filter(|u| u.period == Period::New) {
            if let (Some(g), Some(p)) = (&u.gold_sense_id, best.get(u.usage_id.as_str())) {
                *gold_of_pred
                    .entry(p.predicted_sense_id.as_str())
                    .or_default()
                    .entry(g.as_str())
                    .or_default() += 1;
            }
        }
    }
    let mut out = Vec::new();
    for d in defs {
        let Some(target) = by_lemma.get(d.lemma.as_str()) else {
            log::warn!("definition `{}` names unknown lemma `{}`, skipped", d.novel_sense_id, d.lemma);
            continue;
        };
        let reference_id = if target.definition_of(&d.novel_sense_id).is_some() {
            Some(d.novel_sense_id.clone())
        } else {
            gold_of_pred.get(d.novel_sense_id.as_str()).and_then(|counts| {
                counts
                    .iter()
                    .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
                    .map(|(g, _)| g.to_string())
            })
        };
        let Some((reference_id, reference)) = reference_id
            .and_then(|id| target.definition_of(&id).map(|r| (id.clone(), r.to_string())))
        else {
            log::warn!("no reference definition for `{}`, skipped", d.novel_sense_id);
            continue;
        };
        let pair = DefinitionPair {
            generated: d.definition.clone(),
            reference: reference.clone(),
        };
        let bleu = bleu(&pair, BLEU_MAX_N)?;
        let embed_f1 = match tokens {
            Some(tv) => {
                let cand = tv.require(&d.definition)?;
                let refs = tv.require(&reference)?;
                Some(greedy_match_score(cand, refs)?.f1)
            }
            None => None,
        };
        out.push(DefinitionScore {
            novel_sense_id: d.novel_sense_id.clone(),
            lemma: d.lemma.clone(),
            reference_sense_id: reference_id,
            bleu,
            embed_f1,
        });
    }
    Ok(out)
}

fn add_definition_means(summary: &mut MetricSummary, scores: &[&DefinitionScore], with_tokens: bool) {
    summary.definitions = Some(scores.len());
    summary.bleu_mean = mean(&scores.iter().map(|s| s.bleu).collect::<Vec<_>>());
    if with_tokens {
        summary.embed_f1_mean = mean(&scores.iter().filter_map(|s| s.embed_f1).collect::<Vec<_>>());
    }
}

pub fn evaluate(
    dataset: &[TargetWord],
    preds: &[SensePrediction],
    defs: Option<&[DefinitionRecord]>,
    tokens: Option<&TokenVectors>,
    averaging: Averaging,
) -> Result<EvalReport> {
    let pairs = gold_pairs(dataset, preds)?;
    let language_of: HashMap<&str, &str> = dataset
        .iter()
        .map(|t| (t.lemma.as_str(), t.language.as_str()))
        .collect();
    let all: Vec<&Vec<LabeledPair>> = pairs.values().collect();
    let mut overall = summarize(&all, averaging)?;
    let mut by_lang: BTreeMap<&str, Vec<&Vec<LabeledPair>>> = BTreeMap::new();
    for (lemma, p) in &pairs {
        by_lang.entry(language_of[lemma.as_str()]).or_default().push(p);
    }
    let mut per_language = BTreeMap::new();
    for (lang, groups) in &by_lang {
        per_language.insert(lang.to_string(), summarize(groups, averaging)?);
    }
    if let Some(defs) = defs {
        let scores = score_definitions(dataset, preds, defs, tokens)?;
        add_definition_means(&mut overall, &scores.iter().collect::<Vec<_>>(), tokens.is_some());
        for (lang, summary) in per_language.iter_mut() {
            let mine: Vec<&DefinitionScore> = scores
                .iter()
                .filter(|s| language_of.get(s.lemma.as_str()) == Some(&lang.as_str()))
                .collect();
            add_definition_means(summary, &mine, tokens.is_some());
        }
    }
    Ok(EvalReport {
        averaging,
        overall,
        per_language,
    })
}

pub fn run_evaluate(
    preds_path: &Path,
    gold_path: &Path,
    defs_path: Option<&Path>,
    tokens_path: Option<&Path>,
    averaging: Averaging,
) -> Result<EvalReport> {
    let dataset = load_dataset(gold_path, DatasetFormat::from_path(gold_path))?;
    let preds = load_predictions(preds_path)?;
    let defs = defs_path.map(load_definitions).transpose()?;
    let tokens = tokens_path.map(TokenVectors::load).transpose()?;
    evaluate(&dataset, &preds, defs.as_deref(), tokens.as_ref(), averaging)
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

pub fn save_report(report: &EvalReport, path: &Path) -> Result<()> {
    write_json(report, path)
}
