//! Domain types shared by every stage of the pipeline.
//!
//! Types validate on construction and are immutable afterwards, so they can be
//! shared freely between concurrent stages.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Literal the router answers with when no configured culture applies.
pub const OTHERS: &str = "Others";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("{field}: must not be empty")]
    Empty { field: &'static str },
    #[error("culture name {0:?} is reserved for the router fallback")]
    ReservedCulture(String),
    #[error("{field}: {value} must be at least 1")]
    NotPositive { field: &'static str, value: usize },
    #[error("duplicate {kind} {name:?}")]
    Duplicate { kind: &'static str, name: String },
    #[error("label {label} is not valid for answer format {format}")]
    LabelFormat { label: Label, format: AnswerFormat },
    #[error("{0}")]
    Invalid(String),
}

/// A culture label such as `Arabic` or `Turkey`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct CultureId(String);

impl CultureId {
    pub fn new(name: impl Into<String>) -> Result<Self, ModelError> {
        let name = name.into();
        let trimmed = name.trim();
        if trimmed.is_empty() {
            return Err(ModelError::Empty { field: "culture" });
        }
        if trimmed.eq_ignore_ascii_case(OTHERS) {
            return Err(ModelError::ReservedCulture(trimmed.to_string()));
        }
        Ok(Self(trimmed.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// File-system friendly form used for dataset paths.
    pub fn slug(&self) -> String {
        slugify(&self.0)
    }
}

impl TryFrom<String> for CultureId {
    type Error = ModelError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<CultureId> for String {
    fn from(value: CultureId) -> Self {
        value.0
    }
}

impl fmt::Display for CultureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub(crate) fn slugify(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    for c in name.chars() {
        if c.is_alphanumeric() || c == '-' || c == '_' {
            out.extend(c.to_lowercase());
        } else if !out.ends_with('_') {
            out.push('_');
        }
    }
    out.trim_matches('_').to_string()
}

/// Router outcome: a configured culture, or the `Others` sentinel.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum RouteTarget {
    Culture(CultureId),
    Others,
}

impl RouteTarget {
    pub fn culture(&self) -> Option<&CultureId> {
        match self {
            Self::Culture(c) => Some(c),
            Self::Others => None,
        }
    }

    pub fn name(&self) -> &str {
        match self {
            Self::Culture(c) => c.as_str(),
            Self::Others => OTHERS,
        }
    }
}

impl fmt::Display for RouteTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl From<RouteTarget> for String {
    fn from(value: RouteTarget) -> Self {
        value.name().to_string()
    }
}

impl TryFrom<String> for RouteTarget {
    type Error = ModelError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        if value == OTHERS {
            Ok(Self::Others)
        } else {
            CultureId::new(value).map(Self::Culture)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerFormat {
    /// Sentence classification answered with `1` / `0`.
    #[serde(rename = "binary_01")]
    Binary01,
    /// Question + candidate answer judged `True` / `False`.
    TrueFalse,
}

impl AnswerFormat {
    pub fn labels(self) -> [Label; 2] {
        match self {
            Self::Binary01 => [Label::One, Label::Zero],
            Self::TrueFalse => [Label::True, Label::False],
        }
    }

    /// The conventional positive label (`1` or `True`).
    pub fn default_positive(self) -> Label {
        self.labels()[0]
    }

    /// Parses a label literal (`0`/`1`, or `true`/`false` in any case).
    pub fn parse_label(self, raw: &str) -> Option<Label> {
        let raw = raw.trim();
        match self {
            Self::Binary01 => match raw {
                "1" => Some(Label::One),
                "0" => Some(Label::Zero),
                _ => None,
            },
            Self::TrueFalse => {
                if raw.eq_ignore_ascii_case("true") {
                    Some(Label::True)
                } else if raw.eq_ignore_ascii_case("false") {
                    Some(Label::False)
                } else {
                    None
                }
            }
        }
    }
}

impl fmt::Display for AnswerFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Binary01 => "binary_01",
            Self::TrueFalse => "true_false",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "0")]
    Zero,
    #[serde(rename = "1")]
    One,
    False,
    True,
}

impl Label {
    pub fn format(self) -> AnswerFormat {
        match self {
            Self::Zero | Self::One => AnswerFormat::Binary01,
            Self::False | Self::True => AnswerFormat::TrueFalse,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Zero => "0",
            Self::One => "1",
            Self::False => "False",
            Self::True => "True",
        }
    }

    /// The other label of the same format.
    pub fn opposite(self) -> Label {
        match self {
            Self::Zero => Self::One,
            Self::One => Self::Zero,
            Self::False => Self::True,
            Self::True => Self::False,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A downstream task the pipeline aligns for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    /// Human-readable label, e.g. `hate speech detection`.
    pub label: String,
    pub answer_format: AnswerFormat,
    /// Label counted as positive when scoring F1.
    pub positive_class: Label,
}

impl TaskSpec {
    pub fn new(
        id: impl Into<String>,
        label: impl Into<String>,
        answer_format: AnswerFormat,
    ) -> Result<Self, ModelError> {
        Self::with_positive(id, label, answer_format, answer_format.default_positive())
    }

    pub fn with_positive(
        id: impl Into<String>,
        label: impl Into<String>,
        answer_format: AnswerFormat,
        positive_class: Label,
    ) -> Result<Self, ModelError> {
        let task = Self {
            id: id.into(),
            label: label.into(),
            answer_format,
            positive_class,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.id.trim().is_empty() {
            return Err(ModelError::Empty { field: "task.id" });
        }
        if self.label.trim().is_empty() {
            return Err(ModelError::Empty { field: "task.label" });
        }
        if self.positive_class.format() != self.answer_format {
            return Err(ModelError::LabelFormat {
                label: self.positive_class,
                format: self.answer_format,
            });
        }
        Ok(())
    }
}

/// An unlabeled task input used to ground query generation and synthesis style.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub id: String,
    pub task_id: String,
    pub text: String,
}

impl Demonstration {
    pub fn new(
        id: impl Into<String>,
        task_id: impl Into<String>,
        text: impl Into<String>,
    ) -> Result<Self, ModelError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(ModelError::Empty { field: "demonstration.text" });
        }
        Ok(Self {
            id: id.into(),
            task_id: task_id.into(),
            text,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    TaskSpecific,
    TaskAgnostic,
}

impl QueryMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::TaskSpecific => "task_specific",
            Self::TaskAgnostic => "task_agnostic",
        }
    }
}

impl fmt::Display for QueryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchQuery {
    pub id: String,
    pub text: String,
    pub mode: QueryMode,
    pub culture: CultureId,
    pub task_id: String,
    /// Demonstration ids shown in the generating prompt.
    pub batch_ids: Vec<String>,
}

impl SearchQuery {
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        mode: QueryMode,
        culture: CultureId,
        task_id: impl Into<String>,
        batch_ids: Vec<String>,
    ) -> Result<Self, ModelError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(ModelError::Empty { field: "query.text" });
        }
        if text.contains(['\n', '\r']) {
            return Err(ModelError::Invalid("query text must be a single line".into()));
        }
        if mode == QueryMode::TaskSpecific && batch_ids.is_empty() {
            return Err(ModelError::Invalid(
                "task-specific queries must reference at least one demonstration".into(),
            ));
        }
        Ok(Self {
            id: id.into(),
            text,
            mode,
            culture,
            task_id: task_id.into(),
            batch_ids,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceRef {
    pub url: String,
    pub fetched_at: chrono::DateTime<chrono::Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchFailure {
    pub url: String,
    pub cause: String,
}

/// Summarized web content retrieved for one query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievedMaterial {
    pub id: String,
    pub query_id: String,
    pub sources: Vec<SourceRef>,
    pub summary: String,
    pub k: usize,
    #[serde(default)]
    pub failures: Vec<FetchFailure>,
}

impl RetrievedMaterial {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.sources.len() > self.k {
            return Err(ModelError::Invalid(format!(
                "material {} has {} sources but k = {}",
                self.id,
                self.sources.len(),
                self.k
            )));
        }
        if !self.sources.is_empty() && self.summary.trim().is_empty() {
            return Err(ModelError::Empty { field: "material.summary" });
        }
        Ok(())
    }
}

/// Payload of a sample or test item.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SampleContent {
    Text { text: String },
    QuestionAnswer { question: String, answer: String },
}

impl SampleContent {
    pub fn text(text: impl Into<String>) -> Self {
        Self::Text { text: text.into() }
    }

    pub fn qa(question: impl Into<String>, answer: impl Into<String>) -> Self {
        Self::QuestionAnswer {
            question: question.into(),
            answer: answer.into(),
        }
    }

    pub fn format(&self) -> AnswerFormat {
        match self {
            Self::Text { .. } => AnswerFormat::Binary01,
            Self::QuestionAnswer { .. } => AnswerFormat::TrueFalse,
        }
    }

    /// Single-text layout: the text itself, or `question\nanswer`.
    pub fn canonical_text(&self) -> String {
        match self {
            Self::Text { text } => text.clone(),
            Self::QuestionAnswer { question, answer } => format!("{question}\n{answer}"),
        }
    }

    fn is_blank(&self) -> bool {
        match self {
            Self::Text { text } => text.trim().is_empty(),
            Self::QuestionAnswer { question, answer } => {
                question.trim().is_empty() || answer.trim().is_empty()
            }
        }
    }
}

/// One generated training item with its provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSample {
    pub content: SampleContent,
    pub label: Label,
    pub culture: CultureId,
    pub task_id: String,
    pub material_id: String,
    pub query_id: String,
    /// Position within the generation call that produced it.
    pub ordinal: usize,
}

impl SyntheticSample {
    pub fn new(
        content: SampleContent,
        label: Label,
        culture: CultureId,
        task_id: impl Into<String>,
        material_id: impl Into<String>,
        query_id: impl Into<String>,
        ordinal: usize,
    ) -> Result<Self, ModelError> {
        if content.is_blank() {
            return Err(ModelError::Empty { field: "sample.content" });
        }
        if label.format() != content.format() {
            return Err(ModelError::LabelFormat {
                label,
                format: content.format(),
            });
        }
        Ok(Self {
            content,
            label,
            culture,
            task_id: task_id.into(),
            material_id: material_id.into(),
            query_id: query_id.into(),
            ordinal,
        })
    }

    pub fn id(&self) -> String {
        format!("{}#{}", self.material_id, self.ordinal)
    }
}

/// A labeled evaluation item read from a benchmark file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledItem {
    pub id: String,
    pub task_id: String,
    pub content: SampleContent,
    pub label: Label,
}

/// All synthetic samples for one culture, across tasks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CultureDataset {
    pub culture: CultureId,
    pub samples: Vec<SyntheticSample>,
    pub content_digest: String,
}

impl CultureDataset {
    /// Builds a dataset in canonical sample order and computes its digest.
    pub fn new(culture: CultureId, mut samples: Vec<SyntheticSample>) -> Result<Self, ModelError> {
        if let Some(stray) = samples.iter().find(|s| s.culture != culture) {
            return Err(ModelError::Invalid(format!(
                "sample {} belongs to {} not {}",
                stray.id(),
                stray.culture,
                culture
            )));
        }
        sort_canonical(&mut samples);
        let content_digest = crate::store::dataset_digest(&samples);
        Ok(Self {
            culture,
            samples,
            content_digest,
        })
    }

    /// Splits the dataset back into its task-level sets.
    pub fn by_task(&self) -> BTreeMap<&str, Vec<&SyntheticSample>> {
        let mut out: BTreeMap<&str, Vec<&SyntheticSample>> = BTreeMap::new();
        for s in &self.samples {
            out.entry(s.task_id.as_str()).or_default().push(s);
        }
        out
    }
}

pub(crate) fn sort_canonical(samples: &mut [SyntheticSample]) {
    samples.sort_by(|a, b| {
        (&a.task_id, a.ordinal, &a.material_id).cmp(&(&b.task_id, b.ordinal, &b.material_id))
    });
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterStatus {
    Pending,
    Training,
    Ready,
    Failed,
}

/// Binding between a culture and a trained adapter on the inference backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterRef {
    pub culture: CultureId,
    pub backend_adapter_id: String,
    pub trained_on_digest: String,
    pub status: AdapterStatus,
}

impl AdapterRef {
    pub fn ready(
        culture: CultureId,
        backend_adapter_id: impl Into<String>,
        trained_on_digest: impl Into<String>,
    ) -> Result<Self, ModelError> {
        let backend_adapter_id = backend_adapter_id.into();
        if backend_adapter_id.trim().is_empty() {
            return Err(ModelError::Empty { field: "adapter.backend_adapter_id" });
        }
        Ok(Self {
            culture,
            backend_adapter_id,
            trained_on_digest: trained_on_digest.into(),
            status: AdapterStatus::Ready,
        })
    }

    pub fn is_ready(&self) -> bool {
        self.status == AdapterStatus::Ready && !self.backend_adapter_id.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchKind {
    Exact,
    Normalized,
    FallbackOthers,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub input_digest: String,
    pub chosen: RouteTarget,
    pub raw_answer: String,
    pub match_kind: MatchKind,
}

/// Per-task F1 across seeds for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub task_id: String,
    pub method_name: String,
    pub per_seed_f1: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl EvalRecord {
    pub fn new(
        task_id: impl Into<String>,
        method_name: impl Into<String>,
        per_seed_f1: Vec<f64>,
    ) -> Result<Self, ModelError> {
        if let Some(bad) = per_seed_f1.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ModelError::Invalid(format!("F1 value {bad} outside [0, 1]")));
        }
        let (mean, std) = crate::eval::aggregate_runs(&per_seed_f1)
            .map_err(|e| ModelError::Invalid(e.to_string()))?;
        Ok(Self {
            task_id: task_id.into(),
            method_name: method_name.into(),
            per_seed_f1,
            mean,
            std,
        })
    }
}
