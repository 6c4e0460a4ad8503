//! Synthesis calls, sample-block parsing and per-culture assembly.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, CallSettings, ChatBackend};
use crate::model::{
    AnswerFormat, CultureDataset, CultureId, Demonstration, Label, ModelError, RetrievedMaterial, SampleContent,
    SyntheticSample, TaskSpec,
};
use crate::prompts::{PromptError, Templates};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("{request_id}: no parseable samples in reply ({dropped} block(s) dropped)")]
    NoSamples { request_id: String, dropped: usize },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedBlock {
    pub content: SampleContent,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedBlock {
    /// 0-based position among the blocks found in the reply.
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParseOutcome {
    pub blocks: Vec<ParsedBlock>,
    pub dropped: Vec<DroppedBlock>,
}

fn binary_markers() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?im)^[ \t]*(text|label)[ \t]*:").expect("static regex"))
}

fn qa_markers() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?im)^[ \t]*(question|answer|label)[ \t]*:").expect("static regex"))
}

/// Splits the reply into (lowercased key, value) segments at line-initial
/// markers. Text before the first marker is ignored.
fn segments<'a>(reply: &'a str, re: &Regex) -> Vec<(String, &'a str)> {
    let marks: Vec<_> = re.captures_iter(reply).collect();
    let mut out = Vec::with_capacity(marks.len());
    for (i, cap) in marks.iter().enumerate() {
        let whole = cap.get(0).expect("match");
        let end = marks.get(i + 1).map_or(reply.len(), |c| c.get(0).expect("match").start());
        out.push((cap[1].to_ascii_lowercase(), &reply[whole.end()..end]));
    }
    out
}

fn label_value(raw: &str, format: AnswerFormat) -> Result<Label, String> {
    let first = raw.trim().lines().next().unwrap_or("").trim();
    let cleaned = first.trim_matches(|c: char| matches!(c, '[' | ']' | '"' | '\'' | '*' | '`' | '.' | ' '));
    format
        .parse_label(cleaned)
        .ok_or_else(|| format!("label {first:?} is not one of {}", format))
}

/// Parses `TEXT:`/`LABEL:` blocks (binary) or `question:`/`answer:`/`label:`
/// blocks (true/false). Markers are matched at line starts, case-insensitively;
/// values may span lines up to the next marker. Blocks with a missing field,
/// empty content or an out-of-domain label are dropped and reported.
pub fn parse_sample_blocks(reply: &str, format: AnswerFormat) -> ParseOutcome {
    let reply = reply.replace("\r\n", "\n");
    let mut out = ParseOutcome::default();
    let mut index = 0;
    let drop = |out: &mut ParseOutcome, index: &mut usize, reason: String| {
        tracing::warn!(block = *index, %reason, "dropped sample block");
        out.dropped.push(DroppedBlock { index: *index, reason });
        *index += 1;
    };

    match format {
        AnswerFormat::Binary01 => {
            let mut text: Option<&str> = None;
            for (key, value) in segments(&reply, binary_markers()) {
                match (key.as_str(), text.take()) {
                    ("text", prev) => {
                        if prev.is_some() {
                            drop(&mut out, &mut index, "TEXT without LABEL".into());
                        }
                        text = Some(value);
                    }
                    (_, None) => drop(&mut out, &mut index, "LABEL without TEXT".into()),
                    (_, Some(t)) => {
                        let t = t.trim();
                        match label_value(value, format) {
                            _ if t.is_empty() => drop(&mut out, &mut index, "empty TEXT".into()),
                            Ok(label) => {
                                out.blocks.push(ParsedBlock {
                                    content: SampleContent::text(t),
                                    label,
                                });
                                index += 1;
                            }
                            Err(reason) => drop(&mut out, &mut index, reason),
                        }
                    }
                }
            }
            if text.is_some() {
                drop(&mut out, &mut index, "TEXT without LABEL".into());
            }
        }
        AnswerFormat::TrueFalse => {
            let mut question: Option<&str> = None;
            let mut answer: Option<&str> = None;
            for (key, value) in segments(&reply, qa_markers()) {
                match key.as_str() {
                    "question" => {
                        if question.is_some() {
                            drop(&mut out, &mut index, "question without label".into());
                        }
                        question = Some(value);
                        answer = None;
                    }
                    "answer" => {
                        if question.is_none() || answer.is_some() {
                            drop(&mut out, &mut index, "answer out of order".into());
                            question = None;
                            answer = None;
                        } else {
                            answer = Some(value);
                        }
                    }
                    _ => match (question.take(), answer.take()) {
                        (Some(q), Some(a)) => {
                            let (q, a) = (q.trim(), a.trim());
                            match label_value(value, format) {
                                _ if q.is_empty() || a.is_empty() => {
                                    drop(&mut out, &mut index, "empty question or answer".into())
                                }
                                Ok(label) => {
                                    out.blocks.push(ParsedBlock {
                                        content: SampleContent::qa(q, a),
                                        label,
                                    });
                                    index += 1;
                                }
                                Err(reason) => drop(&mut out, &mut index, reason),
                            }
                        }
                        _ => drop(&mut out, &mut index, "label without question and answer".into()),
                    },
                }
            }
            if question.is_some() {
                drop(&mut out, &mut index, "question without label".into());
            }
        }
    }
    out
}

/// Canonical text of one block in the template's output format.
pub fn serialize_block(block: &ParsedBlock) -> String {
    match &block.content {
        SampleContent::Text { text } => format!("TEXT: {text}\nLABEL: {}", block.label),
        SampleContent::QuestionAnswer { question, answer } => {
            format!("question: {question}\nanswer: {answer}\nlabel: {}", block.label)
        }
    }
}

pub fn serialize_blocks(blocks: &[ParsedBlock]) -> String {
    blocks.iter().map(serialize_block).collect::<Vec<_>>().join("\n\n")
}

/// Positive/negative counts requested and obtained by one synthesis call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassBalance {
    pub requested_positive: usize,
    pub requested_negative: usize,
    pub positive: usize,
    pub negative: usize,
}

impl ClassBalance {
    pub fn is_exact(&self) -> bool {
        self.positive == self.requested_positive && self.negative == self.requested_negative
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisOutcome {
    pub samples: Vec<SyntheticSample>,
    pub balance: ClassBalance,
    pub dropped: Vec<DroppedBlock>,
}

/// One synthesis call: m samples grounded in `material`, styled after `batch`.
pub async fn synthesize(
    m: usize,
    culture: &CultureId,
    task: &TaskSpec,
    batch: &[Demonstration],
    material: &RetrievedMaterial,
    chat: &dyn ChatBackend,
    templates: &Templates,
    settings: &CallSettings,
) -> Result<SynthesisOutcome, SynthError> {
    material.validate()?;
    let prompt = templates.synthesis(m, task, material, culture, batch)?;
    let request_id = format!("synth/{}", material.id);
    let reply = chat.chat(&settings.request(&prompt, request_id.clone())?).await?;
    let parsed = parse_sample_blocks(&reply.text, task.answer_format);
    if parsed.blocks.is_empty() {
        return Err(SynthError::NoSamples {
            request_id,
            dropped: parsed.dropped.len(),
        });
    }
    let samples = parsed
        .blocks
        .into_iter()
        .take(m)
        .enumerate()
        .map(|(ordinal, b)| {
            SyntheticSample::new(
                b.content,
                b.label,
                culture.clone(),
                task.id.clone(),
                material.id.clone(),
                material.query_id.clone(),
                ordinal,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let positive = samples.iter().filter(|s| s.label == task.positive_class).count();
    Ok(SynthesisOutcome {
        balance: ClassBalance {
            requested_positive: m / 2,
            requested_negative: m / 2,
            positive,
            negative: samples.len() - positive,
        },
        samples,
        dropped: parsed.dropped,
    })
}

/// Groups samples by culture across tasks.
pub fn assemble_culture_datasets(
    samples: Vec<SyntheticSample>,
) -> Result<BTreeMap<CultureId, CultureDataset>, ModelError> {
    let mut grouped: BTreeMap<CultureId, Vec<SyntheticSample>> = BTreeMap::new();
    for s in samples {
        grouped.entry(s.culture.clone()).or_default().push(s);
    }
    grouped
        .into_iter()
        .map(|(c, s)| Ok((c.clone(), CultureDataset::new(c, s)?)))
        .collect()
}
