//! Stage wiring: plan, generate, retrieve, synthesize, assemble, persist,
//! plus the seed-averaged evaluation loop.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use chrono::Utc;
use futures::future::join_all;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::backend::http::{api_key_from_env, HttpChat, HttpSearch};
use crate::backend::limit::Limited;
use crate::backend::mock::ScriptedChat;
use crate::backend::sim::{SimulatedChat, SimulatedSearch};
use crate::backend::{BackendError, CallSettings, ChatBackend, SearchBackend};
use crate::config::{BackendKind, ConfigError, PipelineConfig};
use crate::dedup::{self, DedupError, LeakageReport};
use crate::eval::{self, ComparisonTable, EvalError, TableLayout};
use crate::gateway::{Gateway, GatewayError};
use crate::model::{
    CultureDataset, CultureId, Demonstration, EvalRecord, LabeledItem, ModelError, QueryMode, RetrievedMaterial,
    SearchQuery, SyntheticSample,
};
use crate::prompts::{PromptError, Templates};
use crate::query::{self, QueryBatchRequest, QueryError};
use crate::search_agent::{self, MaterialError};
use crate::store::{self, CorpusLayout, RunManifest, StageSummary, StoreError, TaskDataset};
use crate::synth::{self, SynthError};
use crate::training::{self, AdapterRegistry, HttpTrainer, MockTrainer, TrainError, TrainOptions, Trainer};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Material(#[from] MaterialError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Dedup(#[from] DedupError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("task {0:?} has no test_set configured")]
    NoTestSet(String),
}

impl PipelineError {
    /// True when a model, search or trainer service is at fault rather
    /// than the caller's input.
    pub fn is_backend(&self) -> bool {
        match self {
            PipelineError::Backend(_) => true,
            PipelineError::Query(QueryError::Backend(_)) => true,
            PipelineError::Material(MaterialError::Backend(_)) => true,
            PipelineError::Synth(SynthError::Backend(_)) => true,
            PipelineError::Gateway(GatewayError::Backend(_)) => true,
            PipelineError::Train(e) => !matches!(
                e,
                TrainError::DigestMismatch { .. } | TrainError::TooFewStages(_) | TrainError::Store(_)
            ),
            _ => false,
        }
    }
}

/// The two service handles every stage talks through.
#[derive(Clone)]
pub struct Backends {
    pub chat: Arc<dyn ChatBackend>,
    pub search: Arc<dyn SearchBackend>,
}

impl Backends {
    /// Builds clients per `backends.*.kind`. Mock chat answers from the
    /// script and falls back to the simulator for unscripted prompts.
    pub fn from_config(cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        let c = &cfg.backends.chat;
        let sim = || SimulatedChat::new(cfg.seed).with_base_model(cfg.base_model_id.clone());
        let chat: Arc<dyn ChatBackend> = match c.kind {
            BackendKind::Http => {
                let key = api_key_from_env(c.api_key_env.as_deref())?;
                let url = c.url.clone().expect("validated");
                Arc::new(Limited::new(
                    HttpChat::new(url, key).with_retry(c.retry.clone()).with_timeout(cfg.chat_timeout()),
                    c.max_in_flight,
                ))
            }
            BackendKind::Mock => {
                let script = c.script.as_ref().expect("validated");
                let chat = ScriptedChat::from_file(script)?.with_fallback(Arc::new(sim()));
                Arc::new(Limited::new(chat, c.max_in_flight))
            }
            BackendKind::Sim => Arc::new(Limited::new(sim(), c.max_in_flight)),
        };
        let s = &cfg.backends.search;
        let search: Arc<dyn SearchBackend> = match s.kind {
            BackendKind::Http => {
                let key = api_key_from_env(s.api_key_env.as_deref())?;
                let url = s.url.clone().expect("validated");
                Arc::new(Limited::new(
                    HttpSearch::new(url, key)
                        .with_retry(s.retry.clone())
                        .with_page_cap(s.page_cap)
                        .respect_robots(s.respect_robots),
                    s.max_in_flight,
                ))
            }
            BackendKind::Mock | BackendKind::Sim => {
                Arc::new(Limited::new(SimulatedSearch::new(cfg.budget.k), s.max_in_flight))
            }
        };
        Ok(Self { chat, search })
    }

    pub fn new(chat: Arc<dyn ChatBackend>, search: Arc<dyn SearchBackend>) -> Self {
        Self { chat, search }
    }

    pub fn describe(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("chat".to_string(), self.chat.describe()),
            ("search".to_string(), self.search.describe()),
        ])
    }
}

pub fn trainer_from_config(cfg: &PipelineConfig, url_override: Option<&str>) -> Result<Arc<dyn Trainer>, PipelineError> {
    let url = url_override.unwrap_or(&cfg.trainer.url);
    if url == "mock" {
        return Ok(Arc::new(MockTrainer::new()));
    }
    let key = api_key_from_env(cfg.trainer.api_key_env.as_deref())?;
    Ok(Arc::new(HttpTrainer::new(url, key)))
}

pub fn train_options(cfg: &PipelineConfig) -> TrainOptions {
    let mut opts = TrainOptions::new(cfg.base_model_id.clone());
    opts.hyperparams = cfg.trainer.hyperparams.clone();
    opts.poll_interval = Duration::from_millis(cfg.trainer.poll_interval_ms);
    opts.timeout = Duration::from_millis(cfg.trainer.timeout_ms);
    opts
}

pub fn templates(cfg: &PipelineConfig) -> Result<Arc<Templates>, PipelineError> {
    Ok(Arc::new(match &cfg.paths.templates {
        Some(dir) => Templates::from_dir(dir)?,
        None => Templates::embedded().clone(),
    }))
}

pub fn layout(cfg: &PipelineConfig) -> CorpusLayout {
    CorpusLayout::new(cfg.paths.root.clone())
}

pub fn load_test_set(cfg: &PipelineConfig, task_id: &str) -> Result<TaskDataset, PipelineError> {
    let tc = cfg
        .task_config(task_id)
        .ok_or_else(|| GatewayError::UnknownTask(task_id.to_string()))?;
    let path = tc.test_set.as_ref().ok_or_else(|| PipelineError::NoTestSet(task_id.to_string()))?;
    let task = cfg.task(task_id).expect("task exists");
    Ok(store::read_task_dataset(path, &task, &tc.columns)?)
}

fn demo_rng(seed: u64, task_id: &str) -> ChaCha8Rng {
    let key = format!("{seed}\u{1f}{task_id}\u{1f}demonstrations");
    let digest = dedup::sha1_hex(key.as_bytes());
    let mut bytes = [0u8; 32];
    hex::decode_to_slice(&digest[..40], &mut bytes[..20]).expect("hex digest");
    ChaCha8Rng::from_seed(bytes)
}

/// Demonstrations per task id: the task's demonstration file, else a
/// `generation.demo_fraction` sample of its test set (ids kept, so the
/// evaluator can hold them out), else none.
pub fn load_demonstrations(cfg: &PipelineConfig) -> Result<BTreeMap<String, Vec<Demonstration>>, PipelineError> {
    let mut out = BTreeMap::new();
    for tc in &cfg.tasks {
        let demos = if let Some(path) = &tc.demonstrations {
            store::read_demonstrations(path, &tc.id)?
        } else if tc.test_set.is_some() {
            let ds = load_test_set(cfg, &tc.id)?;
            let take = ((ds.items.len() as f64) * cfg.generation.demo_fraction).ceil() as usize;
            let mut items: Vec<&LabeledItem> = ds.items.iter().collect();
            items.shuffle(&mut demo_rng(cfg.seed, &tc.id));
            let mut chosen: Vec<&LabeledItem> = items.into_iter().take(take).collect();
            chosen.sort_by(|a, b| a.id.cmp(&b.id));
            chosen
                .into_iter()
                .map(|i| Demonstration::new(i.id.clone(), tc.id.clone(), i.content.canonical_text()))
                .collect::<Result<_, _>>()?
        } else {
            Vec::new()
        };
        out.insert(tc.id.clone(), demos);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeCounts {
    pub queries_planned: usize,
    pub queries: usize,
    pub materials: usize,
    pub samples: usize,
}

/// Everything one synthesis run produced, in deterministic order.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisRun {
    pub queries: Vec<SearchQuery>,
    pub materials: Vec<RetrievedMaterial>,
    pub samples: Vec<SyntheticSample>,
    pub datasets: BTreeMap<CultureId, CultureDataset>,
    pub per_mode: BTreeMap<QueryMode, ModeCounts>,
    pub warnings: Vec<String>,
}

impl SynthesisRun {
    /// "48 samples (24/culture)" when cultures are even, otherwise each
    /// culture's count.
    pub fn sample_summary(&self) -> String {
        let counts: Vec<(String, usize)> =
            self.datasets.iter().map(|(c, d)| (c.to_string(), d.samples.len())).collect();
        let total: usize = counts.iter().map(|(_, n)| n).sum();
        let first = counts.first().map(|(_, n)| *n);
        if counts.iter().all(|(_, n)| Some(*n) == first) {
            format!("{total} samples ({}/culture)", first.unwrap_or(0))
        } else {
            let each: Vec<String> = counts.iter().map(|(c, n)| format!("{c} {n}")).collect();
            format!("{total} samples ({})", each.join(", "))
        }
    }

    pub fn summary(&self) -> String {
        let mut lines: Vec<String> = self
            .per_mode
            .iter()
            .map(|(mode, c)| {
                format!(
                    "{mode}: {} queries ({} planned), {} materials, {} samples",
                    c.queries, c.queries_planned, c.materials, c.samples
                )
            })
            .collect();
        lines.push(self.sample_summary());
        lines.join("\n")
    }
}

fn synth_settings(cfg: &PipelineConfig) -> CallSettings {
    let mut s = CallSettings::new(cfg.generation.model.clone(), cfg.generation.temperature);
    s.max_tokens = cfg.generation.max_tokens;
    s
}

/// Runs every stage up to assembly. Completed stages are appended to
/// `stages` as they finish, so an aborted run still reports them.
pub async fn run_synthesis(
    cfg: &PipelineConfig,
    demos: &BTreeMap<String, Vec<Demonstration>>,
    modes: &[QueryMode],
    backends: &Backends,
    templates: &Templates,
    stages: &mut Vec<StageSummary>,
) -> Result<SynthesisRun, PipelineError> {
    let settings = synth_settings(cfg);
    let chat = backends.chat.as_ref();
    let search = backends.search.as_ref();
    let mut warnings = Vec::new();
    let mut per_mode = BTreeMap::new();

    let mut requests: Vec<QueryBatchRequest> = Vec::new();
    for &mode in modes {
        let planned = query::plan_query_matrix(cfg, demos, mode)?;
        per_mode.insert(
            mode,
            ModeCounts {
                queries_planned: planned.len() * cfg.budget.n,
                queries: 0,
                materials: 0,
                samples: 0,
            },
        );
        requests.extend(planned);
    }
    stages.push(
        StageSummary::new("plan")
            .count("requests", requests.len())
            .count("queries_planned", requests.len() * cfg.budget.n),
    );

    let batches = join_all(
        requests
            .iter()
            .map(|r| query::generate_queries(r, chat, templates, &settings, cfg.generation.retry_short_queries)),
    )
    .await;
    let mut queries: Vec<SearchQuery> = Vec::new();
    let mut stage = StageSummary::new("queries");
    let mut calls = 0;
    for (req, result) in requests.iter().zip(batches) {
        match result {
            Ok(b) => {
                calls += b.calls as usize;
                stage.warnings.extend(b.shortfall);
                per_mode.get_mut(&req.mode).expect("planned").queries += b.queries.len();
                queries.extend(b.queries);
            }
            Err(e @ QueryError::NoQueries { .. }) => {
                tracing::warn!(error = %e, "skipping query batch");
                stage.warnings.push(e.to_string());
            }
            Err(e) => return Err(e.into()),
        }
    }
    warnings.extend(stage.warnings.clone());
    stages.push(stage.count("calls", calls).count("queries_parsed", queries.len()));

    let tasks: BTreeMap<String, _> = cfg.task_specs().into_iter().map(|t| (t.id.clone(), t)).collect();
    let fetched = join_all(queries.iter().map(|q| {
        search_agent::retrieve_material(
            q,
            &tasks[&q.task_id].label,
            cfg.budget.k,
            search,
            chat,
            templates,
            &settings,
            cfg.generation.summary_input_cap,
        )
    }))
    .await;
    let mut stage = StageSummary::new("materials");
    let mut pairs: Vec<(usize, RetrievedMaterial)> = Vec::new();
    let mut fetch_failures = 0;
    for (i, result) in fetched.into_iter().enumerate() {
        match result {
            Ok(m) => {
                fetch_failures += m.failures.len();
                pairs.push((i, m));
            }
            Err(e) if e.is_recoverable() => {
                tracing::warn!(error = %e, "skipping query without material");
                stage.warnings.push(e.to_string());
            }
            Err(e) => return Err(e.into()),
        }
    }
    for (i, _) in &pairs {
        per_mode.get_mut(&queries[*i].mode).expect("planned").materials += 1;
    }
    warnings.extend(stage.warnings.clone());
    stages.push(
        stage
            .count("materials", pairs.len())
            .count("skipped", queries.len() - pairs.len())
            .count("fetch_failures", fetch_failures),
    );

    let outcomes = join_all(pairs.iter().map(|(i, material)| {
        let q = &queries[*i];
        let ordinal = ordinal_in_request(&queries, *i);
        let pool = demos.get(&q.task_id).map_or(&[][..], Vec::as_slice);
        let batch = query::sample_batch(
            pool,
            cfg.budget.b,
            cfg.seed,
            &q.culture,
            &q.task_id,
            &format!("synth/{}", q.mode),
            ordinal as u64,
        );
        let task = &tasks[&q.task_id];
        let settings = &settings;
        async move { synth::synthesize(cfg.budget.m, &q.culture, task, &batch, material, chat, templates, settings).await }
    }))
    .await;
    let mut stage = StageSummary::new("synthesis");
    let mut samples = Vec::new();
    let (mut dropped, mut imbalanced) = (0, 0);
    for ((i, _), result) in pairs.iter().zip(outcomes) {
        match result {
            Ok(o) => {
                dropped += o.dropped.len();
                if !o.balance.is_exact() {
                    imbalanced += 1;
                }
                per_mode.get_mut(&queries[*i].mode).expect("planned").samples += o.samples.len();
                samples.extend(o.samples);
            }
            Err(e @ SynthError::NoSamples { .. }) => {
                tracing::warn!(error = %e, "synthesis produced nothing");
                stage.warnings.push(e.to_string());
            }
            Err(e) => return Err(e.into()),
        }
    }
    warnings.extend(stage.warnings.clone());
    stages.push(
        stage
            .count("calls", pairs.len())
            .count("samples", samples.len())
            .count("dropped_blocks", dropped)
            .count("imbalanced_calls", imbalanced),
    );

    let datasets = synth::assemble_culture_datasets(samples.clone())?;
    let mut stage = StageSummary::new("assemble").count("datasets", datasets.len());
    for (c, d) in &datasets {
        stage = stage.count(c.as_str(), d.samples.len());
    }
    stages.push(stage);

    Ok(SynthesisRun {
        queries,
        materials: pairs.into_iter().map(|(_, m)| m).collect(),
        samples,
        datasets,
        per_mode,
        warnings,
    })
}

/// 1-based position of `queries[i]` among queries of the same request.
fn ordinal_in_request(queries: &[SearchQuery], i: usize) -> usize {
    let q = &queries[i];
    queries[..i]
        .iter()
        .filter(|p| p.culture == q.culture && p.task_id == q.task_id && p.mode == q.mode)
        .count()
        + 1
}

/// Writes per-task and per-culture datasets, queries and materials.
/// Returns dataset digests keyed by "<culture>" and "<culture>/<task>".
pub fn persist(run: &SynthesisRun, layout: &CorpusLayout, force: bool) -> Result<BTreeMap<String, String>, PipelineError> {
    let mut digests = BTreeMap::new();
    for (culture, dataset) in &run.datasets {
        for (task, samples) in dataset.by_task() {
            let owned: Vec<SyntheticSample> = samples.into_iter().cloned().collect();
            let d = store::write_samples(&layout.task_dataset(culture, task), &owned, force)?;
            digests.insert(format!("{culture}/{task}"), d);
        }
        let d = store::write_dataset(dataset, &layout.culture_dataset(culture), force)?;
        digests.insert(culture.to_string(), d);
    }
    let mut by_key: BTreeMap<(CultureId, String), (Vec<&SearchQuery>, Vec<&RetrievedMaterial>)> = BTreeMap::new();
    for q in &run.queries {
        by_key.entry((q.culture.clone(), q.task_id.clone())).or_default().0.push(q);
    }
    let owner: BTreeMap<&str, &SearchQuery> = run.queries.iter().map(|q| (q.id.as_str(), q)).collect();
    for m in &run.materials {
        let q = owner[m.query_id.as_str()];
        by_key.entry((q.culture.clone(), q.task_id.clone())).or_default().1.push(m);
    }
    for ((culture, task), (qs, ms)) in by_key {
        store::write_jsonl(&layout.queries(&culture, &task), &qs)?;
        store::write_jsonl(&layout.materials(&culture, &task), &ms)?;
    }
    Ok(digests)
}

/// Hashes every sample against every configured test set.
pub fn leakage_against_tests(cfg: &PipelineConfig, samples: &[SyntheticSample]) -> Result<Option<LeakageReport>, PipelineError> {
    let mut tests = Vec::new();
    for tc in cfg.tasks.iter().filter(|t| t.test_set.is_some()) {
        tests.extend(load_test_set(cfg, &tc.id)?.items);
    }
    if tests.is_empty() {
        return Ok(None);
    }
    Ok(Some(dedup::check_leakage(samples, &tests, cfg.dedup.mode)?))
}

/// A finished or aborted `synth` run and the manifest describing it.
#[derive(Debug)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub manifest_path: Option<PathBuf>,
    pub result: Result<SynthesisRun, PipelineError>,
    pub leakage: Option<LeakageReport>,
}

/// Full synthesis run with persistence and a manifest, written even when a
/// stage aborts.
pub async fn run_pipeline(
    cfg: &PipelineConfig,
    modes: &[QueryMode],
    backends: &Backends,
    templates: &Templates,
    force: bool,
) -> RunOutcome {
    let layout = layout(cfg);
    let mut manifest = RunManifest::new(cfg.seed, cfg.to_json());
    manifest.backends = backends.describe();
    let mut leakage = None;
    let result: Result<SynthesisRun, PipelineError> = async {
        let demos = load_demonstrations(cfg)?;
        let run = run_synthesis(cfg, &demos, modes, backends, templates, &mut manifest.stages).await?;
        manifest.dataset_digests = persist(&run, &layout, force)?;
        manifest
            .stages
            .push(StageSummary::new("persist").count("files", manifest.dataset_digests.len()));
        if let Some(report) = leakage_against_tests(cfg, &run.samples)? {
            manifest.dedup_report_digest = Some(report.digest());
            manifest.stages.push(
                StageSummary::new("dedup")
                    .count("overlaps", report.overlap_count)
                    .count("duplicate_groups", report.duplicate_groups.len()),
            );
            leakage = Some(report);
        }
        Ok(run)
    }
    .await;
    if let Err(e) = &result {
        manifest.abort_cause = Some(e.to_string());
    }
    manifest.finished_at = Some(Utc::now());
    let (manifest_path, result) = match (store::write_run_manifest(&layout, &manifest), result) {
        (Ok(p), r) => (Some(p), r),
        (Err(e), Ok(_)) => (None, Err(e.into())),
        (Err(_), r) => (None, r),
    };
    RunOutcome {
        manifest,
        manifest_path,
        result,
        leakage,
    }
}

/// Trains one adapter per culture dataset and collects the ready ones.
pub async fn train_cultures(
    datasets: &[(CultureId, PathBuf, String)],
    trainer: &dyn Trainer,
    opts: &TrainOptions,
) -> Result<(AdapterRegistry, Vec<training::TrainingJob>), PipelineError> {
    let mut registry = AdapterRegistry::new();
    let mut jobs = Vec::new();
    for result in training::train_all(datasets, trainer, opts).await {
        let job = result?;
        if let Some(a) = job.adapter_ref() {
            registry.insert(a);
        }
        jobs.push(job);
    }
    Ok((registry, jobs))
}

pub const BASE_METHOD: &str = "Base";
pub const CULTURE_METHOD: &str = "CultureManager";

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRunReport {
    pub records: Vec<EvalRecord>,
    pub table: ComparisonTable,
    /// (task, method) -> parse failures summed over seeds
    pub parse_failures: BTreeMap<(String, String), usize>,
    pub seeds: Vec<u64>,
}

/// Task columns grouped by each task's `culture`; ungrouped tasks share an
/// unnamed group.
pub fn table_layout(cfg: &PipelineConfig, task_ids: &[String]) -> TableLayout {
    let mut groups: Vec<(String, Vec<String>)> = Vec::new();
    for id in task_ids {
        let name = cfg.task_config(id).and_then(|t| t.culture.clone()).unwrap_or_default();
        match groups.iter_mut().find(|(g, _)| *g == name) {
            Some((_, tasks)) => tasks.push(id.clone()),
            None => groups.push((name, vec![id.clone()])),
        }
    }
    TableLayout { groups }
}

/// For each seed: synthesize, persist under `<root>/eval/seed-<s>`, train
/// one adapter per culture, then score the base model and the routed
/// gateway on each task's held-out test items.
pub async fn run_evaluation(
    cfg: &PipelineConfig,
    seeds: usize,
    modes: &[QueryMode],
    trainer: &dyn Trainer,
    templates: &Templates,
) -> Result<EvalRunReport, PipelineError> {
    let tasks: Vec<String> = cfg.tasks.iter().filter(|t| t.test_set.is_some()).map(|t| t.id.clone()).collect();
    if tasks.is_empty() {
        return Err(PipelineError::NoTestSet(cfg.tasks[0].id.clone()));
    }
    let tests: BTreeMap<String, TaskDataset> =
        tasks.iter().map(|t| Ok((t.clone(), load_test_set(cfg, t)?))).collect::<Result<_, PipelineError>>()?;
    let mut scores: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    let mut parse_failures: BTreeMap<(String, String), usize> = BTreeMap::new();
    let seed_list: Vec<u64> = (0..seeds as u64).map(|i| cfg.seed + i).collect();

    for &seed in &seed_list {
        let mut run_cfg = cfg.clone();
        run_cfg.seed = seed;
        run_cfg.paths.root = cfg.paths.root.join("eval").join(format!("seed-{seed}"));
        let backends = Backends::from_config(&run_cfg)?;
        let demos = load_demonstrations(&run_cfg)?;
        let mut stages = Vec::new();
        let run = run_synthesis(&run_cfg, &demos, modes, &backends, templates, &mut stages).await?;
        let layout = layout(&run_cfg);
        let digests = persist(&run, &layout, true)?;
        let inputs: Vec<(CultureId, PathBuf, String)> = run
            .datasets
            .keys()
            .map(|c| (c.clone(), layout.culture_dataset(c), digests[c.as_str()].clone()))
            .collect();
        let (registry, _) = train_cultures(&inputs, trainer, &train_options(&run_cfg)).await?;
        registry.save(&layout.registry())?;

        let gateway = Gateway::new(
            backends.chat.clone(),
            Arc::new(templates.clone()),
            run_cfg.culture_ids(),
            run_cfg.task_specs(),
            run_cfg.base_model_id.clone(),
            registry,
        )
        .with_parse_mode(run_cfg.gateway.parse_mode)
        .with_strict_router(run_cfg.router.strict);

        for task_id in &tasks {
            let held_out: BTreeSet<&str> = demos[task_id].iter().map(|d| d.id.as_str()).collect();
            let items: Vec<&LabeledItem> =
                tests[task_id].items.iter().filter(|i| !held_out.contains(i.id.as_str())).collect();
            let golds: Vec<_> = items.iter().map(|i| i.label).collect();
            let positive = run_cfg.positive_label(task_id).expect("task exists");

            let base = join_all(items.iter().map(|i| gateway.infer_base(&i.content, task_id))).await;
            let base: Vec<_> = base.into_iter().collect::<Result<_, _>>()?;

            let routed = join_all(items.iter().map(|i| gateway.infer(&i.content, task_id))).await;
            let mut preds = Vec::with_capacity(routed.len());
            for r in routed {
                match r {
                    Ok(inf) => preds.push(Some(inf.label)),
                    Err(GatewayError::Parse { .. }) => preds.push(None),
                    Err(e) => return Err(e.into()),
                }
            }

            for (method, p) in [(BASE_METHOD, base), (CULTURE_METHOD, preds)] {
                let scored = eval::score_with_failures(&p, &golds, positive)?;
                let key = (task_id.clone(), method.to_string());
                scores.entry(key.clone()).or_default().push(scored.f1);
                *parse_failures.entry(key).or_default() += scored.parse_failures;
            }
        }
    }

    let mut records = Vec::new();
    for method in [BASE_METHOD, CULTURE_METHOD] {
        for task in &tasks {
            let per_seed = scores.remove(&(task.clone(), method.to_string())).unwrap_or_default();
            records.push(EvalRecord::new(task.clone(), method, per_seed)?);
        }
    }
    let table = eval::emit_comparison(&records, &table_layout(cfg, &tasks))?;
    Ok(EvalRunReport {
        records,
        table,
        parse_failures,
        seeds: seed_list,
    })
}
