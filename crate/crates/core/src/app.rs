//! Command-line surface. Each command returns a [`Report`] holding both a
//! human summary and a JSON value; `--json` picks which one is printed.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use futures::future::join_all;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{BackendKind, ConfigError, PipelineConfig};
use crate::dedup::{self, CanonicalMode};
use crate::eval;
use crate::gateway::{self, Gateway, GatewayError, InferRequest};
use crate::model::{AnswerFormat, CultureId, Label, LabeledItem, QueryMode, SyntheticSample, TaskSpec};
use crate::pipeline::{self, Backends, PipelineError};
use crate::router;
use crate::store::{self, ColumnMap, RunManifest, StageSummary, StoreError};
use crate::training::{self, AdapterRegistry, JournaledTrainer, StageRef, TrainError, TrainingJob};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_BACKEND: i32 = 2;
pub const EXIT_LEAKAGE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "culture-manager", version, about = "Culture-aware data synthesis, adapter training and routed inference")]
pub struct Cli {
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    /// Override the config's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Pipeline config file (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Specific,
    Agnostic,
    Both,
}

impl ModeArg {
    pub fn modes(self) -> Vec<QueryMode> {
        match self {
            ModeArg::Specific => vec![QueryMode::TaskSpecific],
            ModeArg::Agnostic => vec![QueryMode::TaskAgnostic],
            ModeArg::Both => vec![QueryMode::TaskSpecific, QueryMode::TaskAgnostic],
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate queries, retrieve material, synthesize and persist datasets.
    Synth {
        #[arg(long, value_enum, default_value_t = ModeArg::Specific)]
        mode: ModeArg,
        /// Scripted chat replies (JSON object of prompt SHA-1 -> reply);
        /// unscripted prompts go to the simulator.
        #[arg(long)]
        mock: Option<PathBuf>,
        /// Overwrite dataset files whose content differs.
        #[arg(long)]
        force: bool,
    },
    /// Report exact-hash overlap between synthetic samples and test items.
    DedupCheck {
        /// Directory searched recursively for synthetic `.jsonl` datasets.
        #[arg(long)]
        synthetic: PathBuf,
        /// Directory of test files (`.jsonl` or `.csv`, task id = file stem).
        #[arg(long)]
        tests: PathBuf,
        /// Hash raw bytes without normalization.
        #[arg(long)]
        strict_verbatim: bool,
    },
    /// Train one adapter per culture and write the registry.
    Train {
        /// Comma-separated dataset paths trained in order; `{culture}` is
        /// replaced by each culture's slug.
        #[arg(long)]
        staged: Option<String>,
        /// Trainer base URL, or "mock". Defaults to the config.
        #[arg(long)]
        trainer: Option<String>,
        /// Poll the jobs recorded in the submission journal instead of
        /// submitting new ones.
        #[arg(long)]
        resume: bool,
    },
    /// Route texts to a culture or Others.
    Route {
        #[arg(long, conflicts_with = "file", required_unless_present = "file")]
        text: Option<String>,
        /// One input per line.
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// Run routed inference over an input file.
    Infer {
        #[arg(long)]
        task: String,
        /// `.txt` (one text per line) or JSON lines with `text` or
        /// `question` and `answer`.
        #[arg(long)]
        input: PathBuf,
    },
    /// Score predictions, or run the seed-averaged evaluation.
    Eval(EvalArgs),
    /// Serve `POST /infer` and `GET /healthz`.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

#[derive(Debug, Args)]
#[command(args_conflicts_with_subcommands = true)]
pub struct EvalArgs {
    #[command(subcommand)]
    pub run: Option<EvalCommand>,
    /// Predictions: JSON lines with `label` (and optionally `id`), or one
    /// label per line.
    #[arg(long, requires_all = ["gold", "task"])]
    pub preds: Option<PathBuf>,
    /// Gold test file (`.jsonl` or `.csv`).
    #[arg(long)]
    pub gold: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Synthesize, train and score Base vs CultureManager over several seeds.
    Run {
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long, value_enum, default_value_t = ModeArg::Both)]
        mode: ModeArg,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub text: String,
    pub json: Value,
    pub code: i32,
}

impl Report {
    fn ok(text: impl Into<String>, json: Value) -> Self {
        Self {
            text: text.into(),
            json,
            code: EXIT_OK,
        }
    }

    pub fn render(&self, as_json: bool) -> String {
        if as_json {
            serde_json::to_string_pretty(&self.json).expect("json value")
        } else {
            self.text.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn validation(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }

    pub fn render(&self, as_json: bool) -> String {
        if as_json {
            json!({"error": self.message, "exit_code": self.code}).to_string()
        } else {
            format!("error: {}", self.message)
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        let code = if e.is_backend() { EXIT_BACKEND } else { EXIT_VALIDATION };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

macro_rules! via_pipeline {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                PipelineError::from(e).into()
            }
        }
    )*};
}
via_pipeline!(ConfigError, StoreError, TrainError, GatewayError, crate::backend::BackendError, crate::eval::EvalError);

impl From<router::RouterError> for CliError {
    fn from(e: router::RouterError) -> Self {
        GatewayError::from(e).into()
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::validation("this command needs --config <file>"))?;
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

pub async fn run(cli: &Cli) -> Result<Report, CliError> {
    match &cli.command {
        Command::Synth { mode, mock, force } => synth(cli, *mode, mock.as_deref(), *force).await,
        Command::DedupCheck {
            synthetic,
            tests,
            strict_verbatim,
        } => dedup_check(cli, synthetic, tests, *strict_verbatim),
        Command::Train {
            staged,
            trainer,
            resume,
        } => train(cli, staged.as_deref(), trainer.as_deref(), *resume).await,
        Command::Route { text, file } => route(cli, text.as_deref(), file.as_deref()).await,
        Command::Infer { task, input } => infer(cli, task, input).await,
        Command::Eval(args) => match &args.run {
            Some(EvalCommand::Run { seeds, mode }) => eval_run(cli, *seeds, *mode).await,
            None => match (&args.preds, &args.gold, &args.task) {
                (Some(p), Some(g), Some(t)) => eval_preds(cli, p, g, t),
                _ => Err(CliError::validation("eval needs --preds, --gold and --task, or the `run` subcommand")),
            },
        },
        Command::Serve { port, host } => serve(cli, host, *port).await,
    }
}

async fn synth(cli: &Cli, mode: ModeArg, mock: Option<&Path>, force: bool) -> Result<Report, CliError> {
    let mut cfg = load_config(cli)?;
    if let Some(script) = mock {
        cfg.backends.chat.kind = BackendKind::Mock;
        cfg.backends.chat.script = Some(script.to_path_buf());
    }
    let backends = Backends::from_config(&cfg)?;
    let templates = pipeline::templates(&cfg)?;
    let out = pipeline::run_pipeline(&cfg, &mode.modes(), &backends, &templates, force).await;
    let manifest_path = out.manifest_path.as_ref().map(|p| p.display().to_string());
    let run = out.result?;
    let mut text = run.summary();
    for w in &run.warnings {
        text.push_str(&format!("\nwarning: {w}"));
    }
    if let Some(report) = &out.leakage {
        text.push_str(&format!("\nleakage: {}", report.summary()));
    }
    if let Some(p) = &manifest_path {
        text.push_str(&format!("\nmanifest: {p}"));
    }
    let per_mode: BTreeMap<String, Value> = run
        .per_mode
        .iter()
        .map(|(m, c)| {
            (
                m.to_string(),
                json!({"queries_planned": c.queries_planned, "queries": c.queries, "materials": c.materials, "samples": c.samples}),
            )
        })
        .collect();
    let per_culture: BTreeMap<String, usize> =
        run.datasets.iter().map(|(c, d)| (c.to_string(), d.samples.len())).collect();
    let leaked = out.leakage.as_ref().is_some_and(|r| !r.clean);
    let mut report = Report::ok(
        text,
        json!({
            "summary": run.sample_summary(),
            "samples": run.samples.len(),
            "per_culture": per_culture,
            "per_mode": per_mode,
            "dataset_digests": out.manifest.dataset_digests,
            "warnings": run.warnings,
            "leakage": out.leakage,
            "manifest": manifest_path,
        }),
    );
    if leaked {
        report.code = EXIT_LEAKAGE;
    }
    Ok(report)
}

fn files_with(dir: &Path, exts: &[&str]) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = std::fs::read_dir(&d).map_err(|e| CliError::validation(format!("{}: {e}", d.display())))?;
        for entry in entries {
            let path = entry.map_err(|e| CliError::validation(e.to_string()))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().and_then(|e| e.to_str()).is_some_and(|e| exts.contains(&e)) {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Reads a benchmark file whose task is only known by name, trying the
/// config's spec first and then each answer format.
fn read_tests_any(path: &Path, task_id: &str, cfg: Option<&PipelineConfig>) -> Result<Vec<LabeledItem>, CliError> {
    if let Some(task) = cfg.and_then(|c| c.task(task_id)) {
        let cols = cfg.and_then(|c| c.task_config(task_id)).map(|t| t.columns.clone()).unwrap_or_default();
        return Ok(store::read_task_dataset(path, &task, &cols)?.items);
    }
    let mut last = None;
    for format in [AnswerFormat::Binary01, AnswerFormat::TrueFalse] {
        let task = TaskSpec::new(task_id, task_id, format).map_err(|e| CliError::validation(e.to_string()))?;
        match store::read_task_dataset(path, &task, &ColumnMap::default()) {
            Ok(ds) => return Ok(ds.items),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("two attempts").into())
}

fn dedup_check(cli: &Cli, synthetic: &Path, tests: &Path, strict: bool) -> Result<Report, CliError> {
    let cfg = cli.config.as_ref().map(|_| load_config(cli)).transpose()?;
    let mut samples: BTreeMap<String, SyntheticSample> = BTreeMap::new();
    for path in files_with(synthetic, &["jsonl"])? {
        // union files repeat the per-task samples; ids collapse them
        for s in store::read_samples(&path)? {
            samples.entry(s.id()).or_insert(s);
        }
    }
    let mut items = Vec::new();
    for path in files_with(tests, &["jsonl", "csv"])? {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("test").to_string();
        items.extend(read_tests_any(&path, &stem, cfg.as_ref())?);
    }
    let mode = if strict {
        CanonicalMode::StrictVerbatim
    } else {
        cfg.as_ref().map_or(CanonicalMode::Canonical, |c| c.dedup.mode)
    };
    let samples: Vec<SyntheticSample> = samples.into_values().collect();
    let report = dedup::check_leakage(&samples, &items, mode).map_err(PipelineError::from)?;
    let mut text = report.summary();
    for o in &report.overlaps {
        text.push_str(&format!("\n  {} = {} ({})", o.sample_id, o.test_ids.join(", "), o.digest));
    }
    Ok(Report {
        text,
        json: serde_json::to_value(&report).expect("report serializes"),
        code: if report.clean { EXIT_OK } else { EXIT_LEAKAGE },
    })
}

/// Digest the synthesis run recorded for `key`, from the newest manifest.
fn recorded_digest(layout: &store::CorpusLayout, key: &str) -> Result<Option<String>, CliError> {
    let dir = layout.manifests();
    if !dir.exists() {
        return Ok(None);
    }
    let mut runs = files_with(&dir, &["json"])?;
    runs.retain(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("run-")));
    for path in runs.iter().rev() {
        let m: RunManifest = store::read_json(path)?;
        if let Some(d) = m.dataset_digests.get(key) {
            return Ok(Some(d.clone()));
        }
    }
    Ok(None)
}

async fn train(cli: &Cli, staged: Option<&str>, trainer_url: Option<&str>, resume: bool) -> Result<Report, CliError> {
    let cfg = load_config(cli)?;
    let layout = pipeline::layout(&cfg);
    let opts = pipeline::train_options(&cfg);
    let journal_path = cfg.paths.root.join("training").join("jobs.json");
    let inner = pipeline::trainer_from_config(&cfg, trainer_url)?;
    let trainer = JournaledTrainer::new(inner, &journal_path)?;
    let cultures = cfg.culture_ids();
    let mut manifest = RunManifest::new(cfg.seed, cfg.to_json());
    manifest.backends.insert("trainer".into(), training::Trainer::describe(&trainer));

    let jobs: Vec<(CultureId, Result<TrainingJob, TrainError>)> = if resume {
        let journal = training::read_journal(&journal_path)?;
        let mut futures = Vec::new();
        for c in &cultures {
            let Some(entry) = journal.get(c.as_str()) else { continue };
            let job = TrainingJob::new(
                c.clone(),
                vec![StageRef {
                    path: layout.culture_dataset(c),
                    digest: entry.dataset_digest.clone(),
                }],
                opts.hyperparams.clone(),
            );
            futures.push(async {
                (c.clone(), training::resume_training(job, &entry.job_id, &trainer, &opts).await)
            });
        }
        join_all(futures).await
    } else if let Some(spec) = staged {
        let stage_paths = |c: &CultureId| -> Vec<PathBuf> {
            spec.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| PathBuf::from(s.replace("{culture}", &c.slug())))
                .collect()
        };
        join_all(cultures.iter().map(|c| {
            let paths = stage_paths(c);
            let (trainer, opts) = (&trainer, &opts);
            async move { (c.clone(), training::submit_staged_training(c, &paths, trainer, opts).await) }
        }))
        .await
    } else {
        let mut inputs = Vec::new();
        for c in &cultures {
            let path = layout.culture_dataset(c);
            let digest = match recorded_digest(&layout, c.as_str())? {
                Some(d) => d,
                None => store::file_digest(&path)?,
            };
            inputs.push((c.clone(), path, digest));
        }
        let results = training::train_all(&inputs, &trainer, &opts).await;
        inputs.into_iter().map(|(c, _, _)| c).zip(results).collect()
    };

    let registry_path = layout.registry();
    let mut registry = if registry_path.exists() {
        AdapterRegistry::load(&registry_path)?
    } else {
        AdapterRegistry::new()
    };
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    let mut summary = StageSummary::new("train");
    for (c, result) in jobs {
        match result {
            Ok(job) => {
                manifest.training_jobs.insert(c.to_string(), job.job_ids.join(","));
                if let Some(a) = job.adapter_ref() {
                    lines.push(format!("{c}: {} (trained on {})", a.backend_adapter_id, a.trained_on_digest));
                    manifest.adapters.push(a.clone());
                    registry.insert(a);
                }
            }
            Err(e) => {
                lines.push(format!("{c}: failed: {e}"));
                summary.warnings.push(format!("{c}: {e}"));
                failures.push(PipelineError::from(e));
            }
        }
    }
    registry.save(&registry_path)?;
    let errors = summary.warnings.clone();
    manifest.stages.push(summary.count("ready", manifest.adapters.len()).count("failed", failures.len()));
    if let Some(e) = failures.first() {
        manifest.abort_cause = Some(e.to_string());
    }
    manifest.finished_at = Some(chrono::Utc::now());
    let manifest_path = store::write_run_manifest(&layout, &manifest)?;
    lines.push(format!("registry: {}", registry_path.display()));
    lines.push(format!("manifest: {}", manifest_path.display()));
    let missing: Vec<String> = registry.missing(&cultures).iter().map(|c| c.to_string()).collect();
    let code = match failures.first() {
        None => EXIT_OK,
        Some(e) if e.is_backend() => EXIT_BACKEND,
        Some(_) => EXIT_VALIDATION,
    };
    Ok(Report {
        text: lines.join("\n"),
        json: json!({
            "adapters": manifest.adapters,
            "jobs": manifest.training_jobs,
            "missing": missing,
            "errors": errors,
            "registry": registry_path,
            "manifest": manifest_path,
        }),
        code,
    })
}

async fn route(cli: &Cli, text: Option<&str>, file: Option<&Path>) -> Result<Report, CliError> {
    let cfg = load_config(cli)?;
    let backends = Backends::from_config(&cfg)?;
    let templates = pipeline::templates(&cfg)?;
    let inputs: Vec<String> = match (text, file) {
        (Some(t), _) => vec![t.to_string()],
        (None, Some(f)) => store::read_text(f)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(str::to_string)
            .collect(),
        (None, None) => return Err(CliError::validation("route needs --text or --file")),
    };
    let cultures = cfg.culture_ids();
    let decisions = join_all(inputs.iter().map(|i| {
        router::route(i, &cultures, backends.chat.as_ref(), &templates, &cfg.base_model_id, cfg.router.strict)
    }))
    .await
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let text = decisions
        .iter()
        .map(|d| format!("{}\t{:?}\t{}", d.chosen, d.match_kind, d.raw_answer.trim()))
        .collect::<Vec<_>>()
        .join("\n");
    Ok(Report::ok(text, serde_json::to_value(&decisions).expect("decisions serialize")))
}

fn gateway_from_config(cfg: &PipelineConfig, backends: &Backends) -> Result<(Gateway, Vec<String>), CliError> {
    let registry_path = pipeline::layout(cfg).registry();
    let registry = if registry_path.exists() {
        AdapterRegistry::load(&registry_path)?
    } else {
        AdapterRegistry::new()
    };
    let cultures = cfg.culture_ids();
    let missing = registry.missing(&cultures).iter().map(|c| c.to_string()).collect();
    let templates = pipeline::templates(cfg)?;
    let gw = Gateway::new(
        backends.chat.clone(),
        templates,
        cultures,
        cfg.task_specs(),
        cfg.base_model_id.clone(),
        registry,
    )
    .with_parse_mode(cfg.gateway.parse_mode)
    .with_strict_router(cfg.router.strict);
    Ok((gw, missing))
}

#[derive(Debug, Deserialize)]
struct InputLine {
    #[serde(default)]
    id: Option<String>,
    #[serde(flatten)]
    request: InferBody,
}

#[derive(Debug, Deserialize)]
struct InferBody {
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    question: Option<String>,
    #[serde(default)]
    answer: Option<String>,
}

fn read_inputs(path: &Path, task_id: &str) -> Result<Vec<(String, InferRequest)>, CliError> {
    let text = store::read_text(path)?;
    let is_txt = path.extension().and_then(|e| e.to_str()) == Some("txt");
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let default_id = format!("{task_id}:{}", i + 1);
        let (id, body) = if is_txt {
            (default_id, InferBody { text: Some(line.to_string()), question: None, answer: None })
        } else {
            let parsed: InputLine = serde_json::from_str(line)
                .map_err(|e| CliError::validation(format!("{}:{}: {e}", path.display(), i + 1)))?;
            (parsed.id.unwrap_or(default_id), parsed.request)
        };
        out.push((
            id,
            InferRequest {
                task_id: task_id.to_string(),
                text: body.text,
                question: body.question,
                answer: body.answer,
            },
        ));
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct Prediction {
    id: String,
    label: Option<Label>,
    culture: Option<String>,
    adapter_id: Option<String>,
    raw: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    trace: Option<gateway::InferenceTrace>,
}

async fn infer(cli: &Cli, task_id: &str, input: &Path) -> Result<Report, CliError> {
    let cfg = load_config(cli)?;
    let task = cfg
        .task(task_id)
        .ok_or_else(|| CliError::validation(format!("unknown task {task_id:?}")))?;
    let backends = Backends::from_config(&cfg)?;
    let (gw, missing) = gateway_from_config(&cfg, &backends)?;
    let inputs = read_inputs(input, task_id)?;
    let mut contents = Vec::with_capacity(inputs.len());
    for (id, req) in &inputs {
        let c = req
            .content()
            .ok_or_else(|| CliError::validation(format!("{id}: give either text, or question and answer")))?;
        if c.format() != task.answer_format {
            return Err(CliError::validation(format!("{id}: input shape does not match {}", task.answer_format)));
        }
        contents.push(c);
    }
    let results = gw.infer_batch(&contents, task_id).await;
    let mut code = EXIT_OK;
    let mut preds = Vec::with_capacity(results.len());
    for ((id, _), r) in inputs.iter().zip(results) {
        preds.push(match r {
            Ok(i) => Prediction {
                id: id.clone(),
                label: Some(i.label),
                culture: Some(i.trace.routing.chosen.name().to_string()),
                adapter_id: i.trace.adapter_id.clone(),
                raw: Some(i.trace.raw_reply.clone()),
                error: None,
                trace: Some(i.trace),
            },
            Err(GatewayError::Parse { trace }) => Prediction {
                id: id.clone(),
                label: None,
                culture: Some(trace.routing.chosen.name().to_string()),
                adapter_id: trace.adapter_id.clone(),
                raw: Some(trace.raw_reply.clone()),
                error: Some("unparseable answer".into()),
                trace: Some(*trace),
            },
            Err(e) => {
                code = code.max(if matches!(e, GatewayError::Backend(_)) { EXIT_BACKEND } else { EXIT_VALIDATION });
                Prediction {
                    id: id.clone(),
                    label: None,
                    culture: None,
                    adapter_id: None,
                    raw: None,
                    error: Some(e.to_string()),
                    trace: None,
                }
            }
        });
    }
    let mut text: Vec<String> = preds
        .iter()
        .map(|p| serde_json::to_string(p).expect("prediction serializes"))
        .collect();
    if !missing.is_empty() {
        text.insert(0, format!("warning: no adapter for {}", missing.join(", ")));
    }
    Ok(Report {
        text: text.join("\n"),
        json: json!({"predictions": preds, "missing_adapters": missing}),
        code,
    })
}

/// Predictions in file order: JSON lines with `label` (null allowed) and
/// optional `id`, or bare labels one per line.
fn read_predictions(path: &Path, format: AnswerFormat) -> Result<Vec<(Option<String>, Option<Label>)>, CliError> {
    let text = store::read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |v: &str| CliError::validation(format!("{}:{}: {v:?} is not a {format} label", path.display(), i + 1));
        if line.starts_with('{') {
            let v: Value = serde_json::from_str(line)
                .map_err(|e| CliError::validation(format!("{}:{}: {e}", path.display(), i + 1)))?;
            let id = v.get("id").and_then(Value::as_str).map(str::to_string);
            let label = match v.get("label") {
                None | Some(Value::Null) => None,
                Some(Value::String(s)) => Some(format.parse_label(s).ok_or_else(|| bad(s))?),
                Some(other) => {
                    let s = other.to_string();
                    Some(format.parse_label(&s).ok_or_else(|| bad(&s))?)
                }
            };
            out.push((id, label));
        } else {
            out.push((None, Some(format.parse_label(line).ok_or_else(|| bad(line))?)));
        }
    }
    Ok(out)
}

fn eval_preds(cli: &Cli, preds_path: &Path, gold_path: &Path, task_id: &str) -> Result<Report, CliError> {
    let cfg = cli.config.as_ref().map(|_| load_config(cli)).transpose()?;
    let golds = read_tests_any(gold_path, task_id, cfg.as_ref())?;
    let format = golds
        .first()
        .map(|g| g.label.format())
        .ok_or_else(|| CliError::validation(format!("{} has no items", gold_path.display())))?;
    let positive = cfg
        .as_ref()
        .and_then(|c| c.positive_label(task_id))
        .unwrap_or(format.default_positive());
    let preds = read_predictions(preds_path, format)?;
    let aligned: Vec<Option<Label>> = if preds.iter().all(|(id, _)| id.is_some()) && !preds.is_empty() {
        let by_id: BTreeMap<&str, Option<Label>> =
            preds.iter().map(|(id, l)| (id.as_deref().expect("checked"), *l)).collect();
        golds
            .iter()
            .map(|g| {
                by_id
                    .get(g.id.as_str())
                    .copied()
                    .ok_or_else(|| CliError::validation(format!("no prediction for {}", g.id)))
            })
            .collect::<Result<_, _>>()?
    } else {
        preds.into_iter().map(|(_, l)| l).collect()
    };
    let gold_labels: Vec<Label> = golds.iter().map(|g| g.label).collect();
    let scored = eval::score_with_failures(&aligned, &gold_labels, positive)?;
    let c = scored.confusion;
    let text = format!(
        "{task_id}: F1 {:.4} (tp {} fp {} fn {} tn {}, {} parse failures scored as negative)",
        scored.f1, c.tp, c.fp, c.fn_, c.tn, scored.parse_failures
    );
    Ok(Report::ok(
        text,
        json!({"task_id": task_id, "f1": scored.f1, "confusion": {"tp": c.tp, "fp": c.fp, "fn": c.fn_, "tn": c.tn}, "parse_failures": scored.parse_failures}),
    ))
}

async fn eval_run(cli: &Cli, seeds: usize, mode: ModeArg) -> Result<Report, CliError> {
    if seeds == 0 {
        return Err(CliError::validation("--seeds must be at least 1"));
    }
    let cfg = load_config(cli)?;
    let templates = pipeline::templates(&cfg)?;
    let trainer = pipeline::trainer_from_config(&cfg, None)?;
    let report = pipeline::run_evaluation(&cfg, seeds, &mode.modes(), &trainer, &templates).await?;
    let csv_path = cfg.paths.root.join("eval").join("table.csv");
    store::write_atomic(&csv_path, report.table.to_csv().as_bytes())?;
    let mut text = report.table.to_text();
    let failures: Vec<String> = report
        .parse_failures
        .iter()
        .filter(|(_, n)| **n > 0)
        .map(|((t, m), n)| format!("{m}/{t}: {n}"))
        .collect();
    if !failures.is_empty() {
        text.push_str(&format!("\nparse failures: {}", failures.join(", ")));
    }
    text.push_str(&format!("\ntable: {}", csv_path.display()));
    Ok(Report::ok(
        text,
        json!({"seeds": report.seeds, "records": report.records, "csv": report.table.to_csv(), "table_path": csv_path}),
    ))
}

async fn serve(cli: &Cli, host: &str, port: u16) -> Result<Report, CliError> {
    let cfg = load_config(cli)?;
    let backends = Backends::from_config(&cfg)?;
    let (gw, missing) = gateway_from_config(&cfg, &backends)?;
    if !missing.is_empty() {
        tracing::warn!(cultures = %missing.join(", "), "serving without adapters for some cultures");
    }
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .map_err(|e| CliError::validation(format!("bad address {host}:{port}: {e}")))?;
    gateway::serve(Arc::new(gw), addr, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await
    .map_err(|e| CliError::validation(format!("serve on {addr}: {e}")))?;
    Ok(Report::ok("stopped", json!({"stopped": true})))
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn eval_forms_parse() {
        let cli = Cli::try_parse_from(["cm", "eval", "--preds", "p", "--gold", "g", "--task", "t"]).unwrap();
        assert!(matches!(cli.command, Command::Eval(EvalArgs { run: None, .. })));
        let cli = Cli::try_parse_from(["cm", "eval", "run", "--config", "c.toml", "--seeds", "5"]).unwrap();
        assert!(matches!(cli.command, Command::Eval(EvalArgs { run: Some(EvalCommand::Run { seeds: 5, .. }), .. })));
        assert_eq!(cli.config.as_deref(), Some(Path::new("c.toml")));
        assert!(Cli::try_parse_from(["cm", "eval", "--preds", "p"]).is_err());
    }

    #[test]
    fn bare_and_json_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.txt");
        std::fs::write(&p, "1\n0\n").unwrap();
        let got = read_predictions(&p, AnswerFormat::Binary01).unwrap();
        assert_eq!(got, vec![(None, Some(Label::One)), (None, Some(Label::Zero))]);
        std::fs::write(&p, "{\"id\":\"a\",\"label\":\"True\"}\n{\"id\":\"b\",\"label\":null}\n").unwrap();
        let got = read_predictions(&p, AnswerFormat::TrueFalse).unwrap();
        assert_eq!(got, vec![(Some("a".into()), Some(Label::True)), (Some("b".into()), None)]);
        std::fs::write(&p, "2\n").unwrap();
        assert_eq!(read_predictions(&p, AnswerFormat::Binary01).unwrap_err().code, EXIT_VALIDATION);
    }
}
