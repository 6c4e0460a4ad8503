//! Query matrix planning and `### `-line parsing of generated search queries.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::backend::{BackendError, CallSettings, ChatBackend};
use crate::config::PipelineConfig;
use crate::dedup::sha1_hex;
use crate::model::{CultureId, Demonstration, ModelError, QueryMode, SearchQuery, TaskSpec};
use crate::prompts::{PromptError, Templates};

#[derive(Debug, Error)]
pub enum QueryError {
    #[error("task {task_id}: {have} demonstration(s) available, batch size b = {need}")]
    InsufficientDemos { task_id: String, have: usize, need: usize },
    #[error("{request_id}: reply contained no `### ` query lines")]
    NoQueries { request_id: String, reply: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// RNG for batch sampling, derived from the run seed, the (culture, task)
/// pair, a stage name and an iteration counter.
pub fn batch_rng(seed: u64, culture: &CultureId, task_id: &str, stage: &str, iteration: u64) -> ChaCha8Rng {
    let key = format!("{seed}\u{1f}{culture}\u{1f}{task_id}\u{1f}{stage}\u{1f}{iteration}");
    let digest = hex::decode(sha1_hex(key.as_bytes())).expect("hex digest");
    let mut bytes = [0u8; 32];
    bytes[..digest.len()].copy_from_slice(&digest);
    ChaCha8Rng::from_seed(bytes)
}

/// Draws `min(b, demos.len())` demonstrations without replacement.
pub fn sample_batch(
    demos: &[Demonstration],
    b: usize,
    seed: u64,
    culture: &CultureId,
    task_id: &str,
    stage: &str,
    iteration: u64,
) -> Vec<Demonstration> {
    let mut rng = batch_rng(seed, culture, task_id, stage, iteration);
    demos.choose_multiple(&mut rng, b.min(demos.len())).cloned().collect()
}

/// One query-generation call: n queries for a (culture, task, mode).
#[derive(Debug, Clone, PartialEq)]
pub struct QueryBatchRequest {
    pub culture: CultureId,
    pub task: TaskSpec,
    pub mode: QueryMode,
    pub n: usize,
    /// Empty in task-agnostic mode.
    pub batch: Vec<Demonstration>,
}

impl QueryBatchRequest {
    pub fn request_id(&self) -> String {
        format!("query/{}/{}/{}", self.mode, self.culture.slug(), self.task.id)
    }

    fn query_id(&self, i: usize) -> String {
        let mode = match self.mode {
            QueryMode::TaskSpecific => "specific",
            QueryMode::TaskAgnostic => "agnostic",
        };
        format!("{}/{}/{mode}/q{i}", self.culture.slug(), self.task.id)
    }
}

/// Plans |cultures| x |tasks| requests for one mode, cultures outermost.
pub fn plan_query_matrix(
    config: &PipelineConfig,
    demos: &BTreeMap<String, Vec<Demonstration>>,
    mode: QueryMode,
) -> Result<Vec<QueryBatchRequest>, QueryError> {
    let b = config.budget.b;
    let tasks = config.task_specs();
    if mode == QueryMode::TaskSpecific {
        for t in &tasks {
            let have = demos.get(&t.id).map_or(0, Vec::len);
            if have < b {
                return Err(QueryError::InsufficientDemos {
                    task_id: t.id.clone(),
                    have,
                    need: b,
                });
            }
        }
    }
    let mut out = Vec::with_capacity(config.cultures.len() * tasks.len());
    for culture in config.culture_ids() {
        for task in &tasks {
            let batch = match mode {
                QueryMode::TaskSpecific => {
                    sample_batch(&demos[&task.id], b, config.seed, &culture, &task.id, "query", 0)
                }
                QueryMode::TaskAgnostic => Vec::new(),
            };
            out.push(QueryBatchRequest {
                culture: culture.clone(),
                task: task.clone(),
                mode,
                n: config.budget.n,
                batch,
            });
        }
    }
    Ok(out)
}

/// Query texts from lines starting with `### ` (after trimming).
pub fn parse_query_lines(reply: &str) -> Vec<String> {
    reply
        .lines()
        .filter_map(|l| {
            let mut q = l.trim().strip_prefix("### ")?.trim();
            // "### ### q" from models that repeat the marker
            while let Some(rest) = q.strip_prefix("### ") {
                q = rest.trim();
            }
            Some(q.to_string())
        })
        .filter(|q| !q.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryBatch {
    pub queries: Vec<SearchQuery>,
    /// Set when fewer than n queries were parsed.
    pub shortfall: Option<String>,
    pub calls: u32,
}

/// Renders the mode's prompt, calls the backend and parses up to n queries.
/// With `retry_short`, a reply with fewer than n queries gets one more call
/// and the longer result is kept.
pub async fn generate_queries(
    request: &QueryBatchRequest,
    chat: &dyn ChatBackend,
    templates: &Templates,
    settings: &CallSettings,
    retry_short: bool,
) -> Result<QueryBatch, QueryError> {
    let prompt = match request.mode {
        QueryMode::TaskSpecific => {
            templates.task_specific_query(request.n, &request.culture, &request.task.label, &request.batch)?
        }
        QueryMode::TaskAgnostic => templates.task_agnostic_query(request.n, &request.culture, &request.task.label)?,
    };
    let request_id = request.request_id();
    let reply = chat.chat(&settings.request(&prompt, request_id.clone())?).await?;
    let mut texts = parse_query_lines(&reply.text);
    let mut last_reply = reply.text;
    let mut calls = 1;
    if retry_short && texts.len() < request.n {
        let again = chat.chat(&settings.request(&prompt, format!("{request_id}/retry"))?).await?;
        calls += 1;
        let more = parse_query_lines(&again.text);
        if more.len() > texts.len() {
            texts = more;
            last_reply = again.text;
        }
    }
    if texts.is_empty() {
        return Err(QueryError::NoQueries {
            request_id,
            reply: last_reply,
        });
    }
    texts.truncate(request.n);
    let shortfall = (texts.len() < request.n).then(|| {
        let w = format!("{request_id}: parsed {} of {} queries", texts.len(), request.n);
        tracing::warn!("{w}");
        w
    });
    let batch_ids: Vec<String> = request.batch.iter().map(|d| d.id.clone()).collect();
    let queries = texts
        .into_iter()
        .enumerate()
        .map(|(i, t)| {
            SearchQuery::new(
                request.query_id(i + 1),
                t,
                request.mode,
                request.culture.clone(),
                request.task.id.clone(),
                batch_ids.clone(),
            )
        })
        .collect::<Result<_, _>>()?;
    Ok(QueryBatch {
        queries,
        shortfall,
        calls,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::backend::mock::ScriptedChat;
    use crate::config::{Budget, TaskConfig};
    use crate::model::AnswerFormat;

    fn config(cultures: usize, tasks: usize, n: usize, b: usize) -> PipelineConfig {
        let names: Vec<String> = (0..cultures).map(|i| format!("Culture{i}")).collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let tasks = (0..tasks)
            .map(|i| TaskConfig::new(&format!("t{i}"), &format!("task {i}"), AnswerFormat::Binary01))
            .collect();
        PipelineConfig::minimal(&names, tasks, "base", Budget { n, m: 2, b, k: 1 })
    }

    fn demos(tasks: usize, per: usize) -> BTreeMap<String, Vec<Demonstration>> {
        (0..tasks)
            .map(|t| {
                let id = format!("t{t}");
                let d = (0..per)
                    .map(|i| Demonstration::new(format!("{id}#{i}"), &id, format!("demo {i} of {id}")).unwrap())
                    .collect();
                (id, d)
            })
            .collect()
    }

    #[test]
    fn five_by_two_matrix() {
        let cfg = config(5, 2, 10, 3);
        let plan = plan_query_matrix(&cfg, &demos(2, 20), QueryMode::TaskSpecific).unwrap();
        assert_eq!(plan.len(), 10);
        assert_eq!(plan.iter().map(|r| r.n).sum::<usize>(), 100);
        assert!(plan.iter().all(|r| r.batch.len() == 3));
    }

    #[test]
    fn seeded_batches_repeat() {
        let cfg = config(2, 2, 1, 4);
        let a = plan_query_matrix(&cfg, &demos(2, 30), QueryMode::TaskSpecific).unwrap();
        let b = plan_query_matrix(&cfg, &demos(2, 30), QueryMode::TaskSpecific).unwrap();
        assert_eq!(a, b);
        let mut other = cfg.clone();
        other.seed = 99;
        let c = plan_query_matrix(&other, &demos(2, 30), QueryMode::TaskSpecific).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn insufficient_demos_is_an_error_only_for_specific_mode() {
        let cfg = config(1, 1, 1, 5);
        let err = plan_query_matrix(&cfg, &demos(1, 2), QueryMode::TaskSpecific).unwrap_err();
        assert!(matches!(err, QueryError::InsufficientDemos { have: 2, need: 5, .. }));
        let plan = plan_query_matrix(&cfg, &demos(1, 2), QueryMode::TaskAgnostic).unwrap();
        assert!(plan[0].batch.is_empty());
    }

    #[test]
    fn line_filter() {
        assert_eq!(parse_query_lines("### a\n### b\n### c"), vec!["a", "b", "c"]);
        let reply = "Here are the queries:\n\n  ### q  \n###\n#### deeper\nthanks";
        let oracle: Vec<String> = reply
            .split('\n')
            .map(str::trim)
            .filter(|l| l.starts_with("### ") && !l[4..].trim().is_empty())
            .map(|l| l[4..].trim().to_string())
            .collect();
        assert_eq!(parse_query_lines(reply), oracle);
        assert_eq!(oracle, vec!["q"]);
        assert!(parse_query_lines("no queries here").is_empty());
    }

    fn one_request(n: usize) -> (QueryBatchRequest, String) {
        let cfg = config(1, 1, n, 1);
        let req = plan_query_matrix(&cfg, &demos(1, 3), QueryMode::TaskSpecific)
            .unwrap()
            .remove(0);
        let prompt = Templates::embedded()
            .task_specific_query(n, &req.culture, &req.task.label, &req.batch)
            .unwrap();
        (req, prompt.text)
    }

    #[tokio::test]
    async fn generation_parses_and_tags() {
        let (req, prompt) = one_request(3);
        let chat = ScriptedChat::new().with_reply(&prompt, "### a\n### b\n### c\n### d");
        let out = generate_queries(&req, &chat, Templates::embedded(), &CallSettings::new("gen", 0.7), false)
            .await
            .unwrap();
        assert_eq!(out.queries.iter().map(|q| q.text.as_str()).collect::<Vec<_>>(), vec!["a", "b", "c"]);
        assert!(out.shortfall.is_none());
        assert_eq!(out.queries[0].batch_ids, vec![req.batch[0].id.clone()]);
        assert_eq!(out.queries[2].id, "culture0/t0/specific/q3");
    }

    #[tokio::test]
    async fn shortfall_and_zero_parse() {
        let (req, prompt) = one_request(3);
        let chat = ScriptedChat::new().with_reply(&prompt, "preamble\n### only one");
        let out = generate_queries(&req, &chat, Templates::embedded(), &CallSettings::new("gen", 0.7), false)
            .await
            .unwrap();
        assert_eq!(out.queries.len(), 1);
        assert!(out.shortfall.is_some());

        let chat = ScriptedChat::new().with_reply(&prompt, "no queries here");
        let err = generate_queries(&req, &chat, Templates::embedded(), &CallSettings::new("gen", 0.7), false)
            .await
            .unwrap_err();
        assert!(matches!(err, QueryError::NoQueries { .. }));
    }

    #[tokio::test]
    async fn retry_flag_makes_one_more_call() {
        let (req, prompt) = one_request(2);
        let chat = ScriptedChat::new().with_reply(&prompt, "### only one");
        let out = generate_queries(&req, &chat, Templates::embedded(), &CallSettings::new("gen", 0.7), true)
            .await
            .unwrap();
        assert_eq!(out.calls, 2);
        assert_eq!(chat.call_count(), 2);
    }

    proptest! {
        #[test]
        fn matrix_cardinality(c in 1usize..5, t in 1usize..4, n in 1usize..6, b in 1usize..4, seed in any::<u64>()) {
            let mut cfg = config(c, t, n, b);
            cfg.seed = seed;
            for mode in [QueryMode::TaskSpecific, QueryMode::TaskAgnostic] {
                let plan = plan_query_matrix(&cfg, &demos(t, 5), mode).unwrap();
                prop_assert_eq!(plan.len(), c * t);
                prop_assert_eq!(plan.iter().map(|r| r.n).sum::<usize>(), n * c * t);
                prop_assert_eq!(plan.iter().map(|r| r.n * cfg.budget.m).sum::<usize>(), n * cfg.budget.m * c * t);
            }
        }

        #[test]
        fn parsed_queries_are_clean(lines in prop::collection::vec("(### )?[a-z #]{0,12}", 0..12), n in 1usize..6) {
            let reply = lines.join("\n");
            let mut parsed = parse_query_lines(&reply);
            let available = parsed.len();
            parsed.truncate(n);
            prop_assert!(parsed.len() <= n);
            if available >= n { prop_assert_eq!(parsed.len(), n); }
            for q in parsed {
                prop_assert!(!q.starts_with("### "));
                prop_assert!(!q.contains('\n'));
                prop_assert!(!q.is_empty());
            }
        }
    }
}
