//! Deterministic stand-ins that answer every prompt the pipeline renders.
//!
//! [`SimulatedChat`] recognizes each template by its opening text and
//! replies in the format that template asks for; content is derived from a
//! SHA-1 of the prompt, the model id and a seed, so identical inputs give
//! identical replies. [`SimulatedSearch`] serves synthetic results and pages.

use std::sync::OnceLock;
use std::time::Duration;

use async_trait::async_trait;
use regex::Regex;

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse, SearchBackend, SearchResult};
use crate::model::slugify;

const POSITIVE_CUES: [&str; 12] = [
    "offensive", "hate", "spam", "abusive", "threat", "racis", "bias", "stereotyp", "insult", "scam", "negative",
    "harass",
];

fn digest_u64(parts: &[&str]) -> u64 {
    let joined = parts.join("\u{1f}");
    let hex = crate::dedup::sha1_hex(joined.as_bytes());
    u64::from_str_radix(&hex[..16], 16).expect("hex digest")
}

fn capture<'a>(re: &Regex, text: &'a str) -> Option<&'a str> {
    re.captures(text).and_then(|c| c.get(1)).map(|m| m.as_str())
}

macro_rules! re {
    ($name:ident, $pat:expr) => {
        fn $name() -> &'static Regex {
            static RE: OnceLock<Regex> = OnceLock::new();
            RE.get_or_init(|| Regex::new($pat).expect("static regex"))
        }
    };
}

re!(re_query_culture, r"^You are a search query specialist focused on (.+?) culture values\.");
re!(re_query_n, r"craft (\d+) queries");
re!(re_synth_m, r"^Task: Generate (\d+) realistic training data samples for the (.+?) task\.");
re!(re_synth_culture, r"human-like for (.+?) people,");
re!(re_summary, r"^Summarize the following web content into a factual brief about (.+?) relevant to (.+?)\. Preserve concrete examples and terminology\. Content: ");

/// Rule-based chat backend for offline pipeline runs.
#[derive(Debug, Clone)]
pub struct SimulatedChat {
    seed: u64,
    base_model_id: Option<String>,
    base_accuracy: f64,
    adapter_accuracy: f64,
}

impl SimulatedChat {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            base_model_id: None,
            base_accuracy: 0.6,
            adapter_accuracy: 0.85,
        }
    }

    /// Requests addressed to this id answer task prompts with
    /// `base_accuracy`; any other id is treated as an adapter.
    pub fn with_base_model(mut self, id: impl Into<String>) -> Self {
        self.base_model_id = Some(id.into());
        self
    }

    pub fn with_accuracy(mut self, base: f64, adapter: f64) -> Self {
        self.base_accuracy = base;
        self.adapter_accuracy = adapter;
        self
    }

    fn tag(&self, prompt: &str) -> String {
        format!("{:06x}", digest_u64(&[prompt]) & 0xff_ffff)
    }

    fn coin(&self, model: &str, input: &str) -> f64 {
        let v = digest_u64(&[&self.seed.to_string(), model, input]);
        (v % 1_000_000) as f64 / 1_000_000.0
    }

    fn accuracy_for(&self, model: &str) -> f64 {
        match &self.base_model_id {
            Some(base) if base == model => self.base_accuracy,
            _ => self.adapter_accuracy,
        }
    }

    fn reply(&self, request: &ChatRequest) -> String {
        let prompt = request.prompt_text();
        let model = request.model_or_adapter_id.as_str();
        if prompt.starts_with("You are a search query specialist") {
            self.queries(&prompt)
        } else if prompt.starts_with("Summarize the following web content") {
            self.summary(&prompt)
        } else if prompt.starts_with("Task: Generate ") {
            self.samples(&prompt)
        } else if prompt.starts_with("You are a helpful chatbot that knows different cultures") {
            route_by_mention(&prompt)
        } else if prompt.starts_with("If the following sentence has ") {
            let input = between(&prompt, "Sentence: ", " Response:").unwrap_or(&prompt);
            let truth = POSITIVE_CUES.iter().any(|c| input.to_lowercase().contains(c));
            let correct = self.coin(model, input) < self.accuracy_for(model);
            let label = if truth == correct { "1" } else { "0" };
            if digest_u64(&[model, input]) % 7 == 0 {
                format!("The answer is {label}.")
            } else {
                label.to_string()
            }
        } else if prompt.starts_with("Question: ") && prompt.contains("Is this answer true or false") {
            let answer = between(&prompt, "\nAnswer: ", "\nIs this answer").unwrap_or("");
            let lower = answer.to_lowercase();
            let truth = !(lower.contains(" not ") || lower.contains("never") || lower.starts_with("no"));
            let correct = self.coin(model, &prompt) < self.accuracy_for(model);
            if truth == correct { "True" } else { "False" }.to_string()
        } else {
            "OK".to_string()
        }
    }

    fn queries(&self, prompt: &str) -> String {
        let culture = capture(re_query_culture(), prompt).unwrap_or("local");
        let n: usize = capture(re_query_n(), prompt).and_then(|s| s.parse().ok()).unwrap_or(1);
        let task = prompt
            .lines()
            .find_map(|l| l.strip_prefix("- Your queries should focus on understanding patterns and characteristics of "))
            .and_then(|rest| rest.strip_prefix(culture))
            .map_or("customs", str::trim);
        let tag = self.tag(prompt);
        let mut out = String::from("Here are the queries:\n");
        for i in 1..=n {
            out.push_str(&format!("### {culture} {task} perspective {i} ({tag})\n"));
        }
        out
    }

    fn summary(&self, prompt: &str) -> String {
        let caps = re_summary().captures(prompt);
        let culture = caps.as_ref().and_then(|c| c.get(1)).map_or("local", |m| m.as_str());
        let task = caps.as_ref().and_then(|c| c.get(2)).map_or("customs", |m| m.as_str());
        let content = prompt.split_once("Content: ").map_or("", |(_, c)| c);
        let flat: String = content.split_whitespace().collect::<Vec<_>>().join(" ");
        let excerpt: String = flat.chars().take(240).collect();
        format!("{culture} brief on {task}: {excerpt}")
    }

    fn samples(&self, prompt: &str) -> String {
        let caps = re_synth_m().captures(prompt);
        let m: usize = caps
            .as_ref()
            .and_then(|c| c.get(1))
            .and_then(|s| s.as_str().parse().ok())
            .unwrap_or(2);
        let task = caps.as_ref().and_then(|c| c.get(2)).map_or("task", |x| x.as_str());
        let culture = capture(re_synth_culture(), prompt).unwrap_or("local");
        let tag = self.tag(prompt);
        let true_false = prompt.contains("\nquestion: [question]");
        let mut blocks = Vec::with_capacity(m);
        for i in 0..m {
            let positive = i % 2 == 0;
            blocks.push(if true_false {
                let answer = if positive {
                    format!("Yes, this is commonly observed among {culture} people.")
                } else {
                    format!("No, this is not typical for {culture} people.")
                };
                format!(
                    "question: In {culture} culture, what is expected in situation {i} ({tag})?\nanswer: {answer}\nlabel: {}",
                    if positive { "True" } else { "False" }
                )
            } else {
                let body = if positive {
                    format!("An offensive remark typical of {task} in {culture} online talk, variant {i} ({tag}).")
                } else {
                    format!("A friendly everyday {culture} comment unrelated to {task}, variant {i} ({tag}).")
                };
                format!("TEXT: {body}\nLABEL: {}", if positive { 1 } else { 0 })
            });
        }
        blocks.join("\n\n")
    }
}

fn between<'a>(text: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let s = text.rfind(start)? + start.len();
    let e = text[s..].rfind(end).map(|e| s + e).unwrap_or(text.len());
    Some(&text[s..e])
}

fn route_by_mention(prompt: &str) -> String {
    let options: Vec<&str> = prompt
        .lines()
        .filter_map(|l| l.strip_prefix("- "))
        .filter(|l| !l.starts_with("Others (if the text"))
        .collect();
    let input = between(prompt, "\nText: ", "\nAnswer:").unwrap_or("").to_lowercase();
    options
        .iter()
        .find(|o| input.contains(&o.to_lowercase()))
        .map(|o| o.to_string())
        .unwrap_or_else(|| crate::model::OTHERS.to_string())
}

#[async_trait]
impl ChatBackend for SimulatedChat {
    async fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        Ok(ChatResponse {
            text: self.reply(request),
            request_id: request.request_id.clone(),
            backend_latency: Duration::ZERO,
            attempts: 1,
            truncated: false,
        })
    }

    fn describe(&self) -> String {
        format!("simulated-chat(seed={})", self.seed)
    }
}

/// Serves `results_per_query` synthetic hits for every query.
#[derive(Debug, Clone)]
pub struct SimulatedSearch {
    results_per_query: usize,
}

impl SimulatedSearch {
    pub fn new(results_per_query: usize) -> Self {
        Self { results_per_query }
    }
}

impl Default for SimulatedSearch {
    fn default() -> Self {
        Self::new(3)
    }
}

#[async_trait]
impl SearchBackend for SimulatedSearch {
    async fn search(&self, query: &str, k: usize) -> Result<Vec<SearchResult>, BackendError> {
        if k == 0 {
            return Err(BackendError::InvalidRequest("k must be at least 1".into()));
        }
        let slug: String = slugify(query).chars().take(60).collect();
        Ok((1..=self.results_per_query.min(k))
            .map(|rank| SearchResult {
                url: format!("https://sim.example/{slug}/{rank}"),
                title: format!("{query} ({rank})"),
                snippet: format!("Result {rank} for {query}"),
                rank,
            })
            .collect())
    }

    async fn fetch_page(&self, url: &str) -> Result<String, BackendError> {
        Ok(format!(
            "Reference page {url}. Notes on customs, idioms, humor, taboos and everyday expressions, \
             with quoted examples from forums and news comments."
        ))
    }

    fn describe(&self) -> String {
        format!("simulated-search({}/query)", self.results_per_query)
    }
}
