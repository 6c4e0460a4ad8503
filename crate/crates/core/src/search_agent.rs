//! Search, fetch and summarize: one [`RetrievedMaterial`] per query.

use chrono::Utc;
use futures::future::join_all;
use thiserror::Error;

use crate::backend::{BackendError, CallSettings, ChatBackend, SearchBackend};
use crate::model::{FetchFailure, ModelError, RetrievedMaterial, SearchQuery, SourceRef};
use crate::prompts::{PromptError, Templates};

#[derive(Debug, Error)]
pub enum MaterialError {
    #[error("query {query_id}: search returned no results")]
    NoResults { query_id: String },
    #[error("query {query_id}: every fetch failed ({})", fmt_failures(.failures))]
    AllFetchesFailed { query_id: String, failures: Vec<FetchFailure> },
    #[error("query {query_id}: summarizer returned an empty reply")]
    EmptySummary { query_id: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl MaterialError {
    /// Errors that leave the query without material but need not stop a run.
    pub fn is_recoverable(&self) -> bool {
        matches!(
            self,
            MaterialError::NoResults { .. } | MaterialError::AllFetchesFailed { .. } | MaterialError::EmptySummary { .. }
        )
    }
}

fn fmt_failures(f: &[FetchFailure]) -> String {
    f.iter()
        .map(|x| format!("{}: {}", x.url, x.cause))
        .collect::<Vec<_>>()
        .join("; ")
}

pub fn source_header(url: &str) -> String {
    format!("### Source: {url}\n")
}

const SEPARATOR: &str = "\n\n";

fn floor_char_boundary(s: &str, at: usize) -> usize {
    if at >= s.len() {
        return s.len();
    }
    let mut i = at;
    while !s.is_char_boundary(i) {
        i -= 1;
    }
    i
}

/// Concatenates `(url, text)` pairs under source headers, trimming the
/// longest texts first so the result fits in `cap` bytes.
pub fn concat_sources(sources: &[(String, String)], cap: usize) -> String {
    let overhead: usize = sources.iter().map(|(u, _)| source_header(u).len()).sum::<usize>()
        + SEPARATOR.len() * sources.len().saturating_sub(1);
    let budget = cap.saturating_sub(overhead);
    let total: usize = sources.iter().map(|(_, t)| t.len()).sum();

    let level = if total <= budget {
        usize::MAX
    } else {
        // largest per-source length L with sum(min(len, L)) <= budget
        let (mut lo, mut hi) = (0usize, sources.iter().map(|(_, t)| t.len()).max().unwrap_or(0));
        while lo < hi {
            let mid = (lo + hi).div_ceil(2);
            let used: usize = sources.iter().map(|(_, t)| t.len().min(mid)).sum();
            if used <= budget {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        lo
    };

    let joined = sources
        .iter()
        .map(|(u, t)| format!("{}{}", source_header(u), &t[..floor_char_boundary(t, level)]))
        .collect::<Vec<_>>()
        .join(SEPARATOR);
    if joined.len() > cap {
        // headers alone exceed the cap
        joined[..floor_char_boundary(&joined, cap)].to_string()
    } else {
        joined
    }
}

/// Search, fetch each result concurrently, then summarize once.
/// Failed fetches are skipped and recorded on the material.
pub async fn retrieve_material(
    query: &SearchQuery,
    task_label: &str,
    k: usize,
    search: &dyn SearchBackend,
    chat: &dyn ChatBackend,
    templates: &Templates,
    settings: &CallSettings,
    input_cap: usize,
) -> Result<RetrievedMaterial, MaterialError> {
    let results = search.search(&query.text, k).await?;
    if results.is_empty() {
        return Err(MaterialError::NoResults {
            query_id: query.id.clone(),
        });
    }
    let fetched = join_all(results.iter().take(k).map(|r| async move {
        let out = search.fetch_page(&r.url).await;
        (r.url.clone(), out, Utc::now())
    }))
    .await;

    let mut sources = Vec::new();
    let mut texts = Vec::new();
    let mut failures = Vec::new();
    for (url, out, at) in fetched {
        match out {
            Ok(text) => {
                sources.push(SourceRef {
                    url: url.clone(),
                    fetched_at: at,
                });
                texts.push((url, text));
            }
            Err(e) => {
                tracing::warn!(query = %query.id, %url, error = %e, "fetch failed");
                failures.push(FetchFailure {
                    url,
                    cause: e.to_string(),
                });
            }
        }
    }
    if sources.is_empty() {
        return Err(MaterialError::AllFetchesFailed {
            query_id: query.id.clone(),
            failures,
        });
    }

    let content = concat_sources(&texts, input_cap);
    let prompt = templates.summarize(&query.culture, task_label, &content)?;
    let reply = chat
        .chat(&settings.request(&prompt, format!("summarize/{}", query.id))?)
        .await?;
    let summary = reply.text.trim().to_string();
    if summary.is_empty() {
        return Err(MaterialError::EmptySummary {
            query_id: query.id.clone(),
        });
    }
    let material = RetrievedMaterial {
        id: format!("{}/m", query.id),
        query_id: query.id.clone(),
        sources,
        summary,
        k,
        failures,
    };
    material.validate()?;
    Ok(material)
}
