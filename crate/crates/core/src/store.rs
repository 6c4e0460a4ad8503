//! On-disk corpus: datasets, materials, benchmark ingestion and run manifests.
//!
//! Layout under a run root:
//!
//! ```text
//! datasets/<culture>/<task>.jsonl   task-level synthetic sets
//! datasets/<culture>.jsonl          per-culture union (training input)
//! queries/<culture>/<task>.jsonl
//! materials/<culture>/<task>.jsonl
//! manifests/run-<timestamp>-<seed>.json
//! registry.json                     adapter registry
//! ```
//!
//! Datasets are serialized canonically (fixed key order, samples sorted by
//! task, ordinal, material) so their SHA-1 depends only on content.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dedup::sha1_hex;
use crate::model::{
    sort_canonical, AdapterRef, AnswerFormat, CultureDataset, CultureId, Demonstration, Label, LabeledItem,
    ModelError, SampleContent, SyntheticSample, TaskSpec,
};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: starts with a UTF-8 byte order mark")]
    Bom { path: PathBuf },
    #[error("{path}:{line}: {message}")]
    Malformed { path: PathBuf, line: usize, message: String },
    #[error("{path}:{line}: label {value:?} is not valid for {format}")]
    Label {
        path: PathBuf,
        line: usize,
        value: String,
        format: AnswerFormat,
    },
    #[error("refusing to overwrite {path}: existing digest {existing} differs from {new}")]
    Overwrite { path: PathBuf, existing: String, new: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Paths of a run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusLayout {
    pub root: PathBuf,
}

impl CorpusLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn task_dataset(&self, culture: &CultureId, task_id: &str) -> PathBuf {
        self.root
            .join("datasets")
            .join(culture.slug())
            .join(format!("{}.jsonl", crate::model::slugify(task_id)))
    }

    pub fn culture_dataset(&self, culture: &CultureId) -> PathBuf {
        self.root.join("datasets").join(format!("{}.jsonl", culture.slug()))
    }

    pub fn queries(&self, culture: &CultureId, task_id: &str) -> PathBuf {
        self.root
            .join("queries")
            .join(culture.slug())
            .join(format!("{}.jsonl", crate::model::slugify(task_id)))
    }

    pub fn materials(&self, culture: &CultureId, task_id: &str) -> PathBuf {
        self.root
            .join("materials")
            .join(culture.slug())
            .join(format!("{}.jsonl", crate::model::slugify(task_id)))
    }

    pub fn manifests(&self) -> PathBuf {
        self.root.join("manifests")
    }

    pub fn registry(&self) -> PathBuf {
        self.root.join("registry.json")
    }
}

/// One dataset line. Fields are declared in alphabetical order so the
/// serialized key order is sorted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SampleRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    answer: Option<String>,
    culture: String,
    label: serde_json::Value,
    material_id: String,
    ordinal: usize,
    query_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    question: Option<String>,
    task_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
}

fn label_json(label: Label) -> serde_json::Value {
    match label {
        Label::Zero => 0.into(),
        Label::One => 1.into(),
        Label::False | Label::True => label.as_str().into(),
    }
}

fn label_from_json(value: &serde_json::Value, format: AnswerFormat) -> Option<Label> {
    let raw = match value {
        serde_json::Value::Number(n) => n.to_string(),
        serde_json::Value::String(s) => s.clone(),
        serde_json::Value::Bool(b) => b.to_string(),
        _ => return None,
    };
    format.parse_label(&raw)
}

impl From<&SyntheticSample> for SampleRecord {
    fn from(s: &SyntheticSample) -> Self {
        let (text, question, answer) = match &s.content {
            SampleContent::Text { text } => (Some(text.clone()), None, None),
            SampleContent::QuestionAnswer { question, answer } => (None, Some(question.clone()), Some(answer.clone())),
        };
        Self {
            answer,
            culture: s.culture.to_string(),
            label: label_json(s.label),
            material_id: s.material_id.clone(),
            ordinal: s.ordinal,
            query_id: s.query_id.clone(),
            question,
            task_id: s.task_id.clone(),
            text,
        }
    }
}

impl SampleRecord {
    fn into_sample(self) -> Result<SyntheticSample, String> {
        let (content, format) = match (self.text, self.question, self.answer) {
            (Some(text), None, None) => (SampleContent::Text { text }, AnswerFormat::Binary01),
            (None, Some(question), Some(answer)) => {
                (SampleContent::QuestionAnswer { question, answer }, AnswerFormat::TrueFalse)
            }
            _ => return Err("record needs either text or question+answer".into()),
        };
        let label = label_from_json(&self.label, format).ok_or_else(|| format!("bad label {}", self.label))?;
        let culture = CultureId::new(self.culture).map_err(|e| e.to_string())?;
        SyntheticSample::new(content, label, culture, self.task_id, self.material_id, self.query_id, self.ordinal)
            .map_err(|e| e.to_string())
    }
}

/// Canonical line-delimited JSON for a set of samples.
pub fn canonical_jsonl(samples: &[SyntheticSample]) -> String {
    let mut sorted = samples.to_vec();
    sort_canonical(&mut sorted);
    let mut out = String::new();
    for s in &sorted {
        out.push_str(&serde_json::to_string(&SampleRecord::from(s)).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// SHA-1 over [`canonical_jsonl`].
pub fn dataset_digest(samples: &[SyntheticSample]) -> String {
    sha1_hex(canonical_jsonl(samples).as_bytes())
}

/// Writes `bytes` to `path` through a temp file in the same directory and a
/// rename, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| StoreError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

pub fn file_digest(path: &Path) -> Result<String, StoreError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(sha1_hex(&bytes))
}

/// Writes samples canonically; returns the content digest. An existing file
/// with different content is only replaced when `force` is set.
pub fn write_samples(path: &Path, samples: &[SyntheticSample], force: bool) -> Result<String, StoreError> {
    let body = canonical_jsonl(samples);
    let digest = sha1_hex(body.as_bytes());
    if path.exists() {
        let existing = file_digest(path)?;
        if existing == digest {
            return Ok(digest);
        }
        if !force {
            return Err(StoreError::Overwrite {
                path: path.to_path_buf(),
                existing,
                new: digest,
            });
        }
    }
    write_atomic(path, body.as_bytes())?;
    Ok(digest)
}

pub fn write_dataset(dataset: &CultureDataset, path: &Path, force: bool) -> Result<String, StoreError> {
    write_samples(path, &dataset.samples, force)
}

/// Reads a UTF-8 file, rejecting a byte-order mark.
pub fn read_text(path: &Path) -> Result<String, StoreError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    if bytes.starts_with(&[0xEF, 0xBB, 0xBF]) {
        return Err(StoreError::Bom { path: path.to_path_buf() });
    }
    String::from_utf8(bytes).map_err(|e| StoreError::Malformed {
        path: path.to_path_buf(),
        line: 0,
        message: format!("not UTF-8: {e}"),
    })
}

fn malformed(path: &Path, line: usize, message: impl ToString) -> StoreError {
    StoreError::Malformed {
        path: path.to_path_buf(),
        line,
        message: message.to_string(),
    }
}

pub fn read_samples(path: &Path) -> Result<Vec<SyntheticSample>, StoreError> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord = serde_json::from_str(line).map_err(|e| malformed(path, i + 1, e))?;
        out.push(record.into_sample().map_err(|e| malformed(path, i + 1, e))?);
    }
    Ok(out)
}

pub fn read_dataset(path: &Path, culture: &CultureId) -> Result<CultureDataset, StoreError> {
    Ok(CultureDataset::new(culture.clone(), read_samples(path)?)?)
}

/// Writes any serializable rows as JSON lines, atomically.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), StoreError> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).map_err(|e| malformed(path, 0, e))?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    let text = read_text(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| malformed(path, i + 1, e)))
        .collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), StoreError> {
    let mut body = serde_json::to_string_pretty(value).map_err(|e| malformed(path, 0, e))?;
    body.push('\n');
    write_atomic(path, body.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, StoreError> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| malformed(path, e.line(), e))
}

/// Column names used when ingesting benchmark CSV files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub text: String,
    pub question: String,
    pub answer: String,
    pub label: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            text: "text".into(),
            question: "question".into(),
            answer: "answer".into(),
            label: "label".into(),
        }
    }
}

/// A labeled benchmark split for one task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskDataset {
    pub task_id: String,
    pub items: Vec<LabeledItem>,
    pub positives: usize,
    pub negatives: usize,
}

/// Reads a benchmark file: CSV when the extension is `.csv`, JSON lines
/// otherwise. Labels are validated against the task's answer format.
pub fn read_task_dataset(path: &Path, task: &TaskSpec, columns: &ColumnMap) -> Result<TaskDataset, StoreError> {
    let text = read_text(path)?;
    let is_csv = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let rows = if is_csv {
        csv_rows(path, &text, columns)?
    } else {
        json_rows(path, &text, columns)?
    };

    let mut items = Vec::with_capacity(rows.len());
    for (line, fields) in rows {
        let get = |name: &str| fields.get(name).cloned().filter(|v| !v.trim().is_empty());
        let content = match task.answer_format {
            AnswerFormat::Binary01 => SampleContent::Text {
                text: get(&columns.text).ok_or_else(|| malformed(path, line, format!("missing {}", columns.text)))?,
            },
            AnswerFormat::TrueFalse => SampleContent::QuestionAnswer {
                question: get(&columns.question)
                    .ok_or_else(|| malformed(path, line, format!("missing {}", columns.question)))?,
                answer: get(&columns.answer)
                    .ok_or_else(|| malformed(path, line, format!("missing {}", columns.answer)))?,
            },
        };
        let raw_label = get(&columns.label).unwrap_or_default();
        let label = task.answer_format.parse_label(&raw_label).ok_or_else(|| StoreError::Label {
            path: path.to_path_buf(),
            line,
            value: raw_label.clone(),
            format: task.answer_format,
        })?;
        items.push(LabeledItem {
            id: format!("{}:{line}", task.id),
            task_id: task.id.clone(),
            content,
            label,
        });
    }
    if items.is_empty() {
        tracing::warn!(path = %path.display(), task = %task.id, "benchmark file has no items");
    }
    let positives = items.iter().filter(|i| i.label == task.positive_class).count();
    Ok(TaskDataset {
        task_id: task.id.clone(),
        negatives: items.len() - positives,
        positives,
        items,
    })
}

type Row = (usize, BTreeMap<String, String>);

fn json_rows(path: &Path, text: &str, columns: &ColumnMap) -> Result<Vec<Row>, StoreError> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| malformed(path, i + 1, e))?;
        let obj = value
            .as_object()
            .ok_or_else(|| malformed(path, i + 1, "expected a JSON object"))?;
        let mut fields = BTreeMap::new();
        for name in [&columns.text, &columns.question, &columns.answer, &columns.label] {
            if let Some(v) = obj.get(name) {
                let s = match v {
                    serde_json::Value::String(s) => s.clone(),
                    serde_json::Value::Null => continue,
                    other => other.to_string(),
                };
                fields.insert(name.clone(), s);
            }
        }
        rows.push((i + 1, fields));
    }
    Ok(rows)
}

fn csv_rows(path: &Path, text: &str, columns: &ColumnMap) -> Result<Vec<Row>, StoreError> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| malformed(path, 1, e))?.clone();
    let wanted = [&columns.text, &columns.question, &columns.answer, &columns.label];
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // header is line 1
        let line = record
            .as_ref()
            .ok()
            .and_then(|r| r.position())
            .map_or(i + 2, |p| p.line() as usize);
        let record = record.map_err(|e| malformed(path, line, e))?;
        let fields = headers
            .iter()
            .zip(record.iter())
            .filter(|(h, _)| wanted.iter().any(|w| w.as_str() == *h))
            .map(|(h, v)| (h.to_string(), v.to_string()))
            .collect();
        rows.push((line, fields));
    }
    Ok(rows)
}

/// Reads unlabeled demonstrations: `.txt` files hold one per line, anything
/// else is JSON lines with a `text` field (extra fields such as labels are
/// ignored).
pub fn read_demonstrations(path: &Path, task_id: &str) -> Result<Vec<Demonstration>, StoreError> {
    let text = read_text(path)?;
    let is_txt = path.extension().and_then(|e| e.to_str()) == Some("txt");
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let body = if is_txt {
            line.to_string()
        } else {
            let v: serde_json::Value = serde_json::from_str(line).map_err(|e| malformed(path, i + 1, e))?;
            v.get("text")
                .and_then(|t| t.as_str())
                .ok_or_else(|| malformed(path, i + 1, "missing text field"))?
                .to_string()
        };
        out.push(Demonstration::new(format!("{task_id}#{}", i + 1), task_id, body)?);
    }
    Ok(out)
}

/// Per-stage counters recorded in the run manifest.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub name: String,
    pub counts: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl StageSummary {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            ..Self::default()
        }
    }

    pub fn count(mut self, key: &str, value: usize) -> Self {
        self.counts.insert(key.to_string(), value);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub config: serde_json::Value,
    pub backends: BTreeMap<String, String>,
    pub stages: Vec<StageSummary>,
    #[serde(default)]
    pub dataset_digests: BTreeMap<String, String>,
    #[serde(default)]
    pub dedup_report_digest: Option<String>,
    #[serde(default)]
    pub training_jobs: BTreeMap<String, String>,
    #[serde(default)]
    pub adapters: Vec<AdapterRef>,
    #[serde(default)]
    pub abort_cause: Option<String>,
    pub started_at: DateTime<Utc>,
    pub finished_at: Option<DateTime<Utc>>,
}

impl RunManifest {
    pub fn new(seed: u64, config: serde_json::Value) -> Self {
        Self {
            seed,
            config,
            backends: BTreeMap::new(),
            stages: Vec::new(),
            dataset_digests: BTreeMap::new(),
            dedup_report_digest: None,
            training_jobs: BTreeMap::new(),
            adapters: Vec::new(),
            abort_cause: None,
            started_at: Utc::now(),
            finished_at: None,
        }
    }

    /// Copy with timestamps cleared, for replay comparisons.
    pub fn without_timestamps(&self) -> RunManifest {
        let mut m = self.clone();
        m.started_at = DateTime::<Utc>::UNIX_EPOCH;
        m.finished_at = None;
        m
    }
}

/// Writes `manifests/run-<timestamp>-<seed>.json` under `layout`.
pub fn write_run_manifest(layout: &CorpusLayout, manifest: &RunManifest) -> Result<PathBuf, StoreError> {
    let stamp = manifest.started_at.format("%Y%m%dT%H%M%S%.3fZ");
    let path = layout
        .manifests()
        .join(format!("run-{stamp}-{}.json", manifest.seed));
    write_json(&path, manifest)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn culture() -> CultureId {
        CultureId::new("Arabic").unwrap()
    }

    fn samples() -> Vec<SyntheticSample> {
        vec![
            SyntheticSample::new(SampleContent::text("b text"), Label::One, culture(), "hate", "m2", "q2", 0).unwrap(),
            SyntheticSample::new(SampleContent::text("a text"), Label::Zero, culture(), "hate", "m1", "q1", 1).unwrap(),
            SyntheticSample::new(SampleContent::qa("Q?", "A."), Label::True, culture(), "bench", "m3", "q3", 0).unwrap(),
        ]
    }

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = CultureDataset::new(culture(), samples()).unwrap();
        let path = dir.path().join("datasets/arabic.jsonl");
        let digest = write_dataset(&ds, &path, false).unwrap();
        assert_eq!(digest, ds.content_digest);
        assert_eq!(file_digest(&path).unwrap(), digest);
        let back = read_dataset(&path, &culture()).unwrap();
        assert_eq!(back, ds);
        // identical content: no error, same digest
        assert_eq!(write_dataset(&ds, &path, false).unwrap(), digest);
    }

    #[test]
    fn serialization_has_sorted_keys() {
        let line = canonical_jsonl(&samples()[..1]);
        assert_eq!(
            line,
            "{\"culture\":\"Arabic\",\"label\":1,\"material_id\":\"m2\",\"ordinal\":0,\"query_id\":\"q2\",\"task_id\":\"hate\",\"text\":\"b text\"}\n"
        );
    }

    #[test]
    fn digest_ignores_input_order() {
        let mut s = samples();
        let d1 = dataset_digest(&s);
        s.reverse();
        assert_eq!(dataset_digest(&s), d1);
    }

    #[test]
    fn refuses_to_overwrite_different_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_samples(&path, &samples()[..1], false).unwrap();
        let err = write_samples(&path, &samples(), false).unwrap_err();
        assert!(matches!(err, StoreError::Overwrite { .. }));
        write_samples(&path, &samples(), true).unwrap();
        assert_eq!(read_samples(&path).unwrap().len(), 3);
    }

    #[test]
    fn failed_write_leaves_no_partial_target() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("out.jsonl");
        {
            // a temp file that is dropped before persist simulates an interrupted write
            let mut tmp = tempfile::NamedTempFile::new_in(dir.path()).unwrap();
            tmp.write_all(b"{\"partial\":").unwrap();
        }
        assert!(!target.exists());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
        write_atomic(&target, b"done\n").unwrap();
        assert_eq!(std::fs::read_to_string(&target).unwrap(), "done\n");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn bom_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bom.jsonl");
        std::fs::write(&path, b"\xEF\xBB\xBF{}\n").unwrap();
        assert!(matches!(read_samples(&path), Err(StoreError::Bom { .. })));
    }

    #[test]
    fn benchmark_counts_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let task = TaskSpec::new("ar-hate", "hate speech", AnswerFormat::Binary01).unwrap();
        let path = dir.path().join("ar-hate.jsonl");
        let mut body = String::new();
        for i in 0..675 {
            body.push_str(&format!("{{\"text\":\"item {i}\",\"label\":{}}}\n", u8::from(i < 180)));
        }
        std::fs::write(&path, body).unwrap();
        let ds = read_task_dataset(&path, &task, &ColumnMap::default()).unwrap();
        assert_eq!((ds.positives, ds.negatives), (180, 495));

        let empty = dir.path().join("empty.jsonl");
        std::fs::write(&empty, "").unwrap();
        assert!(read_task_dataset(&empty, &task, &ColumnMap::default()).unwrap().items.is_empty());

        let bad = dir.path().join("bad.jsonl");
        std::fs::write(&bad, "{\"text\":\"ok\",\"label\":\"1\"}\n{\"text\":\"x\",\"label\":\"maybe\"}\n").unwrap();
        match read_task_dataset(&bad, &task, &ColumnMap::default()).unwrap_err() {
            StoreError::Label { line, value, .. } => assert_eq!((line, value.as_str()), (2, "maybe")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_with_custom_columns() {
        let dir = tempfile::tempdir().unwrap();
        let task = TaskSpec::new("cb-china", "cultural knowledge", AnswerFormat::TrueFalse).unwrap();
        let path = dir.path().join("bench.csv");
        std::fs::write(&path, "id,prompt,option,truth\n1,\"Q, one?\",A1,TRUE\n2,Q2,A2,false\n").unwrap();
        let columns = ColumnMap {
            question: "prompt".into(),
            answer: "option".into(),
            label: "truth".into(),
            ..ColumnMap::default()
        };
        let ds = read_task_dataset(&path, &task, &columns).unwrap();
        assert_eq!(ds.items.len(), 2);
        assert_eq!(ds.items[0].content, SampleContent::qa("Q, one?", "A1"));
        assert_eq!((ds.positives, ds.negatives), (1, 1));
        assert_eq!(ds.items[1].id, "cb-china:3");
    }

    #[test]
    fn manifest_path_and_stripping() {
        let dir = tempfile::tempdir().unwrap();
        let layout = CorpusLayout::new(dir.path());
        let m = RunManifest::new(7, serde_json::json!({"n": 1}));
        let path = write_run_manifest(&layout, &m).unwrap();
        let name = path.file_name().unwrap().to_str().unwrap().to_string();
        assert!(name.starts_with("run-") && name.ends_with("-7.json"), "{name}");
        let back: RunManifest = read_json(&path).unwrap();
        assert_eq!(back.without_timestamps(), m.without_timestamps());
    }

    #[test]
    fn demonstrations_from_txt_and_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let txt = dir.path().join("d.txt");
        std::fs::write(&txt, "first\n\nsecond\n").unwrap();
        let d = read_demonstrations(&txt, "t").unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d[1].id, "t#3");
        let jl = dir.path().join("d.jsonl");
        std::fs::write(&jl, "{\"text\":\"x\",\"label\":1}\n").unwrap();
        assert_eq!(read_demonstrations(&jl, "t").unwrap()[0].text, "x");
    }
}
