//! Prompt rendering.
//!
//! Every prompt the pipeline sends lives in a text asset under `templates/`
//! with `{name}` placeholders. The assets are compiled in by default and can
//! be swapped for a directory at runtime with [`Templates::from_dir`].
//! Rendering is a single left-to-right pass, so placeholder-looking text
//! inside substituted values is never expanded again.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AnswerFormat, CultureId, Demonstration, RetrievedMaterial, SampleContent, TaskSpec};

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("{0}")]
    InvalidArgument(String),
    #[error("task-specific query generation needs at least one demonstration")]
    EmptyExamples,
    #[error("sample count {0} cannot be split into equal positive and negative halves")]
    OddSampleCount(usize),
    #[error("task {task} expects {expected} input")]
    ShapeMismatch { task: String, expected: AnswerFormat },
    #[error("template {template} references unknown placeholder {{{name}}}")]
    Unresolved { template: TemplateId, name: String },
    #[error("reading template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    QueryTaskSpecific,
    QueryTaskAgnostic,
    SynthesisBinary,
    SynthesisTrueFalse,
    Router,
    TaskBinary,
    TaskTrueFalse,
    Anthropological,
    Summarize,
}

impl TemplateId {
    pub const ALL: [TemplateId; 9] = [
        Self::QueryTaskSpecific,
        Self::QueryTaskAgnostic,
        Self::SynthesisBinary,
        Self::SynthesisTrueFalse,
        Self::Router,
        Self::TaskBinary,
        Self::TaskTrueFalse,
        Self::Anthropological,
        Self::Summarize,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            Self::QueryTaskSpecific => "query_task_specific.txt",
            Self::QueryTaskAgnostic => "query_task_agnostic.txt",
            Self::SynthesisBinary => "synthesis_binary.txt",
            Self::SynthesisTrueFalse => "synthesis_true_false.txt",
            Self::Router => "router.txt",
            Self::TaskBinary => "task_binary.txt",
            Self::TaskTrueFalse => "task_true_false.txt",
            Self::Anthropological => "anthropological.txt",
            Self::Summarize => "summarize.txt",
        }
    }

    fn embedded(self) -> &'static str {
        match self {
            Self::QueryTaskSpecific => include_str!("../templates/query_task_specific.txt"),
            Self::QueryTaskAgnostic => include_str!("../templates/query_task_agnostic.txt"),
            Self::SynthesisBinary => include_str!("../templates/synthesis_binary.txt"),
            Self::SynthesisTrueFalse => include_str!("../templates/synthesis_true_false.txt"),
            Self::Router => include_str!("../templates/router.txt"),
            Self::TaskBinary => include_str!("../templates/task_binary.txt"),
            Self::TaskTrueFalse => include_str!("../templates/task_true_false.txt"),
            Self::Anthropological => include_str!("../templates/anthropological.txt"),
            Self::Summarize => include_str!("../templates/summarize.txt"),
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.file_name().trim_end_matches(".txt"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptRole {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub role: PromptRole,
    pub text: String,
    pub template_id: TemplateId,
    pub placeholder_values: BTreeMap<String, String>,
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([a-z_][a-z0-9_]*)\}").expect("static regex"))
}

fn normalize_newlines(s: &str) -> String {
    s.replace("\r\n", "\n").replace('\r', "\n")
}

/// The loaded template assets.
#[derive(Debug, Clone)]
pub struct Templates {
    texts: BTreeMap<TemplateId, String>,
}

fn clean_asset(raw: &str) -> String {
    let text = normalize_newlines(raw);
    text.strip_suffix('\n').map(str::to_string).unwrap_or(text)
}

impl Templates {
    /// Templates compiled into the binary.
    pub fn embedded() -> &'static Templates {
        static EMBEDDED: OnceLock<Templates> = OnceLock::new();
        EMBEDDED.get_or_init(|| Templates {
            texts: TemplateId::ALL
                .iter()
                .map(|id| (*id, clean_asset(id.embedded())))
                .collect(),
        })
    }

    /// Loads assets from `dir`, falling back to the embedded copy for any
    /// file that is absent.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Templates, PromptError> {
        let dir = dir.as_ref();
        let mut texts = BTreeMap::new();
        for id in TemplateId::ALL {
            let path = dir.join(id.file_name());
            let text = match std::fs::read_to_string(&path) {
                Ok(raw) => clean_asset(&raw),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => clean_asset(id.embedded()),
                Err(source) => {
                    return Err(PromptError::Io {
                        path: path.display().to_string(),
                        source,
                    })
                }
            };
            texts.insert(id, text);
        }
        Ok(Templates { texts })
    }

    /// Raw template text with placeholders intact.
    pub fn source(&self, id: TemplateId) -> &str {
        &self.texts[&id]
    }

    fn render(
        &self,
        id: TemplateId,
        role: PromptRole,
        values: BTreeMap<String, String>,
    ) -> Result<RenderedPrompt, PromptError> {
        let template = self.source(id);
        let mut out = String::with_capacity(template.len() + 256);
        let mut last = 0;
        for caps in placeholder_re().captures_iter(template) {
            let whole = caps.get(0).expect("group 0");
            let name = &caps[1];
            let value = values.get(name).ok_or_else(|| PromptError::Unresolved {
                template: id,
                name: name.to_string(),
            })?;
            out.push_str(&template[last..whole.start()]);
            out.push_str(value);
            last = whole.end();
        }
        out.push_str(&template[last..]);
        Ok(RenderedPrompt {
            role,
            text: normalize_newlines(&out),
            template_id: id,
            placeholder_values: values,
        })
    }

    pub fn task_specific_query(
        &self,
        n: usize,
        culture: &CultureId,
        task_label: &str,
        examples: &[Demonstration],
    ) -> Result<RenderedPrompt, PromptError> {
        require_count("n", n)?;
        if examples.is_empty() {
            return Err(PromptError::EmptyExamples);
        }
        let values = values([
            ("n", n.to_string()),
            ("culture", culture.to_string()),
            ("task_label", task_label.to_string()),
            ("examples", serialize_examples(examples)),
        ]);
        self.render(TemplateId::QueryTaskSpecific, PromptRole::User, values)
    }

    pub fn task_agnostic_query(
        &self,
        n: usize,
        culture: &CultureId,
        task_label: &str,
    ) -> Result<RenderedPrompt, PromptError> {
        require_count("n", n)?;
        let values = values([
            ("n", n.to_string()),
            ("culture", culture.to_string()),
            ("task_label", task_label.to_string()),
        ]);
        self.render(TemplateId::QueryTaskAgnostic, PromptRole::User, values)
    }

    /// Synthesis prompt. Binary tasks use the `TEXT:`/`LABEL:` output format,
    /// true/false tasks the `question:`/`answer:`/`label:` one.
    pub fn synthesis(
        &self,
        m: usize,
        task: &TaskSpec,
        material: &RetrievedMaterial,
        culture: &CultureId,
        examples: &[Demonstration],
    ) -> Result<RenderedPrompt, PromptError> {
        if m < 2 || m % 2 != 0 {
            return Err(PromptError::OddSampleCount(m));
        }
        if material.summary.trim().is_empty() {
            return Err(PromptError::InvalidArgument(format!(
                "material {} has an empty summary",
                material.id
            )));
        }
        let id = match task.answer_format {
            AnswerFormat::Binary01 => TemplateId::SynthesisBinary,
            AnswerFormat::TrueFalse => TemplateId::SynthesisTrueFalse,
        };
        let values = values([
            ("m", m.to_string()),
            ("task_label", task.label.clone()),
            ("text", material.summary.clone()),
            ("culture", culture.to_string()),
            ("examples", serialize_examples(examples)),
        ]);
        self.render(id, PromptRole::User, values)
    }

    pub fn router(&self, cultures: &[CultureId], input: &str) -> Result<RenderedPrompt, PromptError> {
        if cultures.is_empty() {
            return Err(PromptError::InvalidArgument("router needs at least one culture".into()));
        }
        if input.trim().is_empty() {
            return Err(PromptError::InvalidArgument("router input is empty".into()));
        }
        let options = cultures
            .iter()
            .map(|c| format!("- {c}"))
            .collect::<Vec<_>>()
            .join("\n");
        let values = values([("options", options), ("input", input.to_string())]);
        self.render(TemplateId::Router, PromptRole::User, values)
    }

    pub fn task(&self, task: &TaskSpec, input: &SampleContent) -> Result<RenderedPrompt, PromptError> {
        let mismatch = || PromptError::ShapeMismatch {
            task: task.id.clone(),
            expected: task.answer_format,
        };
        match (task.answer_format, input) {
            (AnswerFormat::Binary01, SampleContent::Text { text }) => {
                if text.trim().is_empty() {
                    return Err(PromptError::InvalidArgument("task input is empty".into()));
                }
                let values = values([("task", task.label.clone()), ("input", text.clone())]);
                self.render(TemplateId::TaskBinary, PromptRole::User, values)
            }
            (AnswerFormat::TrueFalse, SampleContent::QuestionAnswer { question, answer }) => {
                if question.trim().is_empty() || answer.trim().is_empty() {
                    return Err(PromptError::InvalidArgument(
                        "question and answer must both be non-empty".into(),
                    ));
                }
                let values = values([("question", question.clone()), ("answer", answer.clone())]);
                self.render(TemplateId::TaskTrueFalse, PromptRole::User, values)
            }
            _ => Err(mismatch()),
        }
    }

    pub fn anthropological(&self, nationality: &str) -> Result<RenderedPrompt, PromptError> {
        if nationality.trim().is_empty() {
            return Err(PromptError::InvalidArgument("nationality is empty".into()));
        }
        let values = values([("nationality", nationality.to_string())]);
        self.render(TemplateId::Anthropological, PromptRole::System, values)
    }

    /// Instruction used by the search agent to condense fetched pages.
    pub fn summarize(
        &self,
        culture: &CultureId,
        task_label: &str,
        content: &str,
    ) -> Result<RenderedPrompt, PromptError> {
        let values = values([
            ("culture", culture.to_string()),
            ("task_label", task_label.to_string()),
            ("content", content.to_string()),
        ]);
        self.render(TemplateId::Summarize, PromptRole::User, values)
    }
}

fn require_count(name: &str, v: usize) -> Result<(), PromptError> {
    if v == 0 {
        return Err(PromptError::InvalidArgument(format!("{name} must be at least 1")));
    }
    Ok(())
}

fn values<const N: usize>(pairs: [(&str, String); N]) -> BTreeMap<String, String> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// Demonstrations as `- text` lines joined by newlines.
pub fn serialize_examples(examples: &[Demonstration]) -> String {
    examples
        .iter()
        .map(|d| format!("- {}", normalize_newlines(d.text.trim())))
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn culture(s: &str) -> CultureId {
        CultureId::new(s).unwrap()
    }

    fn demos(texts: &[&str]) -> Vec<Demonstration> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| Demonstration::new(format!("d{i}"), "t", *t).unwrap())
            .collect()
    }

    fn material(summary: &str) -> RetrievedMaterial {
        RetrievedMaterial {
            id: "m".into(),
            query_id: "q".into(),
            sources: vec![],
            summary: summary.into(),
            k: 1,
            failures: vec![],
        }
    }

    #[test]
    fn specific_query_contains_count_and_examples() {
        let t = Templates::embedded();
        let p = t
            .task_specific_query(5, &culture("Arabic"), "hate speech detection", &demos(&["first demo", "second demo"]))
            .unwrap();
        assert!(p.text.contains("craft 5 queries"));
        assert!(p.text.contains("- first demo\n- second demo"));
        assert!(p.text.contains("### <query 1>"));
    }

    #[test]
    fn minimal_instantiation_substitutes_each_value_once() {
        let t = Templates::embedded();
        let p = t.task_specific_query(1, &culture("Xq"), "tz", &demos(&["only"])).unwrap();
        assert_eq!(p.text.matches("tz").count(), 1);
        assert_eq!(p.text.matches("- only").count(), 1);
        assert_eq!(p.text.matches("craft 1 queries").count(), 1);
    }

    #[test]
    fn specific_query_requires_examples() {
        let err = Templates::embedded().task_specific_query(3, &culture("A"), "t", &[]);
        assert!(matches!(err, Err(PromptError::EmptyExamples)));
    }

    #[test]
    fn agnostic_is_specific_minus_third_requirement() {
        let t = Templates::embedded();
        let c = culture("Arabic");
        let spec = t.task_specific_query(3, &c, "spam detection", &demos(&["x"])).unwrap();
        let agn = t.task_agnostic_query(3, &c, "spam detection").unwrap();
        let expected: Vec<&str> = spec
            .text
            .lines()
            .filter(|l| !l.starts_with("- Your queries can refer to the keywords"))
            .collect();
        assert_eq!(agn.text, expected.join("\n"));
        assert!(!agn.text.contains("following examples"));
        assert!(agn.text.contains("craft 3 queries"));
    }

    #[test]
    fn synthesis_rejects_odd_counts() {
        let t = Templates::embedded();
        let task = TaskSpec::new("spam", "spam detection", AnswerFormat::Binary01).unwrap();
        for m in [0, 1, 5] {
            let err = t.synthesis(m, &task, &material("brief"), &culture("Turkish"), &[]);
            assert!(matches!(err, Err(PromptError::OddSampleCount(_))), "m = {m}");
        }
    }

    #[test]
    fn synthesis_does_not_sanitize_material() {
        let t = Templates::embedded();
        let task = TaskSpec::new("spam", "spam detection", AnswerFormat::Binary01).unwrap();
        let p = t
            .synthesis(2, &task, &material("contains LABEL: 1 and {culture}"), &culture("Turkish"), &[])
            .unwrap();
        assert!(p.text.contains("material: contains LABEL: 1 and {culture}"));
        assert_eq!(p.text.matches("\nTEXT: [content]").count(), 1);
        assert_eq!(p.text.matches("\nLABEL: [1 for positive class, 0 for negative class]").count(), 1);
    }

    #[test]
    fn router_preserves_culture_order() {
        let t = Templates::embedded();
        let ab = t.router(&[culture("A"), culture("B")], "x").unwrap();
        let ba = t.router(&[culture("B"), culture("A")], "x").unwrap();
        assert_ne!(ab.text, ba.text);
        let single = t.router(&[culture("A")], "x").unwrap();
        assert_eq!(single.text.lines().filter(|l| l.starts_with("- ")).count(), 2);
    }

    #[test]
    fn task_prompt_shapes() {
        let t = Templates::embedded();
        let bin = TaskSpec::new("h", "hate speech", AnswerFormat::Binary01).unwrap();
        let tf = TaskSpec::new("c", "cultural bench", AnswerFormat::TrueFalse).unwrap();
        let p = t.task(&bin, &SampleContent::text("some text")).unwrap();
        assert!(p.text.starts_with("If the following sentence has hate speech, respond with '1'."));
        let p = t.task(&tf, &SampleContent::qa("Q?", "A.")).unwrap();
        assert!(p.text.contains("Is this answer true or false for this question?"));
        assert!(matches!(t.task(&tf, &SampleContent::text("x")), Err(PromptError::ShapeMismatch { .. })));
        assert!(t.task(&tf, &SampleContent::qa("Q?", "")).is_err());
    }

    #[test]
    fn anthropological_inverts_to_template() {
        let t = Templates::embedded();
        let p = t.anthropological("Turkish").unwrap();
        assert!(p.text.contains("Imagine you are a married Turkish male."));
        assert_eq!(p.text.matches("Turkish").count(), 1);
        assert_eq!(p.text.replace("Turkish", "{nationality}"), t.source(TemplateId::Anthropological));
    }

    #[test]
    fn values_are_not_reexpanded() {
        let t = Templates::embedded();
        let p = t.router(&[culture("A")], "{input} {options}").unwrap();
        assert!(p.text.contains("Text: {input} {options}\n"));
    }

    #[test]
    fn from_dir_overrides_and_falls_back() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("anthropological.txt"), "Hello {nationality}\r\n").unwrap();
        let t = Templates::from_dir(dir.path()).unwrap();
        assert_eq!(t.anthropological("Kenyan").unwrap().text, "Hello Kenyan");
        assert_eq!(t.source(TemplateId::Router), Templates::embedded().source(TemplateId::Router));
    }

    #[test]
    fn unknown_placeholder_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("anthropological.txt"), "Hello {nationality} {age}").unwrap();
        let t = Templates::from_dir(dir.path()).unwrap();
        assert!(matches!(t.anthropological("X"), Err(PromptError::Unresolved { .. })));
    }
}
