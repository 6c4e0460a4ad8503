//! Pipeline configuration (TOML).
//!
//! API keys never live in the file: backends name the environment variable
//! to read instead (`api_key_env`).

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::RetryPolicy;
use crate::dedup::CanonicalMode;
use crate::model::{AnswerFormat, CultureId, Label, TaskSpec};
use crate::store::ColumnMap;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("invalid `{field}`: {message}")]
    Field { field: String, message: String },
}

fn field_err(field: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    pub cultures: Vec<String>,
    pub tasks: Vec<TaskConfig>,
    pub base_model_id: String,
    pub budget: Budget,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default)]
    pub backends: BackendsConfig,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub router: RouterConfig,
    #[serde(default)]
    pub gateway: GatewayConfig,
    #[serde(default)]
    pub dedup: DedupConfig,
    #[serde(default)]
    pub paths: PathsConfig,
}

/// Per-call budgets: `n` queries per (culture, task, mode), `m` samples per
/// synthesis call, `b` demonstrations per batch, `k` search results per query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budget {
    pub n: usize,
    pub m: usize,
    pub b: usize,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub id: String,
    pub label: String,
    pub answer_format: AnswerFormat,
    #[serde(default)]
    pub positive_class: Option<String>,
    /// Culture whose average column this task contributes to in tables.
    #[serde(default)]
    pub culture: Option<String>,
    #[serde(default)]
    pub demonstrations: Option<PathBuf>,
    #[serde(default)]
    pub test_set: Option<PathBuf>,
    #[serde(default)]
    pub columns: ColumnMap,
}

impl TaskConfig {
    pub fn new(id: &str, label: &str, answer_format: AnswerFormat) -> Self {
        Self {
            id: id.into(),
            label: label.into(),
            answer_format,
            positive_class: None,
            culture: None,
            demonstrations: None,
            test_set: None,
            columns: ColumnMap::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    /// Model that writes queries, summaries and samples.
    pub model: String,
    pub temperature: f32,
    pub max_tokens: Option<u32>,
    /// Retry a query-generation call once when it returns fewer than n queries.
    pub retry_short_queries: bool,
    /// Byte cap on the concatenated sources sent for summarization.
    pub summary_input_cap: usize,
    /// Fraction of a benchmark split sampled as demonstrations when no
    /// demonstration file is given.
    pub demo_fraction: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            model: "gpt-4o".into(),
            temperature: 0.7,
            max_tokens: None,
            retry_short_queries: false,
            summary_input_cap: 24_000,
            demo_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Mock,
    #[default]
    Sim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChatBackendConfig {
    pub kind: BackendKind,
    pub url: Option<String>,
    pub api_key_env: Option<String>,
    /// JSON digest -> reply script used when `kind = "mock"`; unscripted
    /// prompts fall through to the simulator.
    pub script: Option<PathBuf>,
    pub max_in_flight: usize,
    pub timeout_ms: u64,
    pub retry: RetryPolicy,
}

impl Default for ChatBackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Sim,
            url: None,
            api_key_env: None,
            script: None,
            max_in_flight: 8,
            timeout_ms: 120_000,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchBackendConfig {
    pub kind: BackendKind,
    pub url: Option<String>,
    pub api_key_env: Option<String>,
    pub max_in_flight: usize,
    pub page_cap: usize,
    pub respect_robots: bool,
    pub retry: RetryPolicy,
}

impl Default for SearchBackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Sim,
            url: None,
            api_key_env: None,
            max_in_flight: 8,
            page_cap: 64 * 1024,
            respect_robots: true,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendsConfig {
    pub chat: ChatBackendConfig,
    pub search: SearchBackendConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    /// Trainer service base URL, or "mock".
    pub url: String,
    pub api_key_env: Option<String>,
    pub poll_interval_ms: u64,
    pub timeout_ms: u64,
    pub hyperparams: BTreeMap<String, serde_json::Value>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            url: "mock".into(),
            api_key_env: None,
            poll_interval_ms: 2_000,
            timeout_ms: 6 * 60 * 60 * 1000,
            hyperparams: default_hyperparams(),
        }
    }
}

/// Conventional LoRA defaults; the trainer treats them as opaque.
pub fn default_hyperparams() -> BTreeMap<String, serde_json::Value> {
    BTreeMap::from([
        ("rank".to_string(), 16.into()),
        ("epochs".to_string(), 3.into()),
        ("learning_rate".to_string(), 2e-4.into()),
    ])
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouterConfig {
    /// Accept only exact option names (after trimming wrappers).
    pub strict: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseMode {
    #[default]
    Lenient,
    Strict,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub parse_mode: ParseMode,
    pub max_in_flight: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DedupConfig {
    pub mode: CanonicalMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Run directory for datasets, materials, manifests and the registry.
    pub root: PathBuf,
    /// Optional directory of template overrides.
    pub templates: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("run"),
            templates: None,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads and validates a config file. Relative paths inside it are
    /// resolved against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            ConfigError::Parse(m) => ConfigError::Parse(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut self.paths.root);
        if let Some(t) = self.paths.templates.as_mut() {
            fix(t);
        }
        if let Some(s) = self.backends.chat.script.as_mut() {
            fix(s);
        }
        for t in &mut self.tasks {
            if let Some(d) = t.demonstrations.as_mut() {
                fix(d);
            }
            if let Some(d) = t.test_set.as_mut() {
                fix(d);
            }
        }
    }

    /// A config with default sections, mainly for programmatic use.
    pub fn minimal(cultures: &[&str], tasks: Vec<TaskConfig>, base_model_id: &str, budget: Budget) -> Self {
        Self {
            seed: 0,
            cultures: cultures.iter().map(|c| c.to_string()).collect(),
            tasks,
            base_model_id: base_model_id.into(),
            budget,
            generation: GenerationConfig::default(),
            backends: BackendsConfig::default(),
            trainer: TrainerConfig::default(),
            router: RouterConfig::default(),
            gateway: GatewayConfig::default(),
            dedup: DedupConfig::default(),
            paths: PathsConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let Budget { n, m, b, k } = self.budget;
        for (name, v) in [("budget.n", n), ("budget.m", m), ("budget.b", b), ("budget.k", k)] {
            if v < 1 {
                return Err(field_err(name, "must be at least 1"));
            }
        }
        if m % 2 != 0 {
            return Err(field_err("budget.m", format!("{m} is odd; equal class counts need an even m")));
        }
        if self.cultures.is_empty() {
            return Err(field_err("cultures", "at least one culture is required"));
        }
        let mut seen = BTreeSet::new();
        for (i, c) in self.cultures.iter().enumerate() {
            let id = CultureId::new(c.clone()).map_err(|e| field_err(format!("cultures[{i}]"), e.to_string()))?;
            if !seen.insert(id.as_str().to_lowercase()) {
                return Err(field_err(format!("cultures[{i}]"), format!("duplicate culture {c:?}")));
            }
        }
        if self.tasks.is_empty() {
            return Err(field_err("tasks", "at least one task is required"));
        }
        let mut ids = BTreeSet::new();
        for (i, t) in self.tasks.iter().enumerate() {
            self.task_spec_at(i)?;
            if !ids.insert(t.id.as_str()) {
                return Err(field_err(format!("tasks[{i}].id"), format!("duplicate task id {:?}", t.id)));
            }
            if let Some(c) = &t.culture {
                if !self.cultures.iter().any(|x| x == c) {
                    return Err(field_err(format!("tasks[{i}].culture"), format!("{c:?} is not a configured culture")));
                }
            }
        }
        if self.base_model_id.trim().is_empty() {
            return Err(field_err("base_model_id", "must not be empty"));
        }
        if self.generation.model.trim().is_empty() {
            return Err(field_err("generation.model", "must not be empty"));
        }
        if !(0.0..=2.0).contains(&self.generation.temperature) {
            return Err(field_err("generation.temperature", "must be within [0, 2]"));
        }
        if !(self.generation.demo_fraction > 0.0 && self.generation.demo_fraction <= 1.0) {
            return Err(field_err("generation.demo_fraction", "must be within (0, 1]"));
        }
        if self.generation.summary_input_cap == 0 {
            return Err(field_err("generation.summary_input_cap", "must be at least 1"));
        }
        if self.backends.chat.kind == BackendKind::Http && self.backends.chat.url.is_none() {
            return Err(field_err("backends.chat.url", "required when kind = \"http\""));
        }
        if self.backends.chat.kind == BackendKind::Mock && self.backends.chat.script.is_none() {
            return Err(field_err("backends.chat.script", "required when kind = \"mock\""));
        }
        if self.backends.search.kind == BackendKind::Http && self.backends.search.url.is_none() {
            return Err(field_err("backends.search.url", "required when kind = \"http\""));
        }
        if self.backends.chat.max_in_flight == 0 {
            return Err(field_err("backends.chat.max_in_flight", "must be at least 1"));
        }
        if self.backends.search.max_in_flight == 0 {
            return Err(field_err("backends.search.max_in_flight", "must be at least 1"));
        }
        Ok(())
    }

    fn task_spec_at(&self, i: usize) -> Result<TaskSpec, ConfigError> {
        let t = &self.tasks[i];
        let positive = match &t.positive_class {
            None => t.answer_format.default_positive(),
            Some(raw) => t.answer_format.parse_label(raw).ok_or_else(|| {
                field_err(
                    format!("tasks[{i}].positive_class"),
                    format!("{raw:?} is not a {} label", t.answer_format),
                )
            })?,
        };
        TaskSpec::with_positive(t.id.clone(), t.label.clone(), t.answer_format, positive)
            .map_err(|e| field_err(format!("tasks[{i}]"), e.to_string()))
    }

    pub fn culture_ids(&self) -> Vec<CultureId> {
        self.cultures
            .iter()
            .map(|c| CultureId::new(c.clone()).expect("validated"))
            .collect()
    }

    pub fn task_specs(&self) -> Vec<TaskSpec> {
        (0..self.tasks.len())
            .map(|i| self.task_spec_at(i).expect("validated"))
            .collect()
    }

    pub fn task(&self, id: &str) -> Option<TaskSpec> {
        self.tasks
            .iter()
            .position(|t| t.id == id)
            .map(|i| self.task_spec_at(i).expect("validated"))
    }

    pub fn task_config(&self, id: &str) -> Option<&TaskConfig> {
        self.tasks.iter().find(|t| t.id == id)
    }

    pub fn chat_timeout(&self) -> Duration {
        Duration::from_millis(self.backends.chat.timeout_ms)
    }

    pub fn positive_label(&self, task_id: &str) -> Option<Label> {
        self.task(task_id).map(|t| t.positive_class)
    }

    /// JSON form recorded in run manifests.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
