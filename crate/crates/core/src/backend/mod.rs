//! Wire contracts for chat completion and web search.
//!
//! Each capability is a trait with an HTTP implementation (`http`) and
//! deterministic in-process implementations (`mock`, `sim`) so a full
//! pipeline run can happen without network access.

use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompts::{PromptRole, RenderedPrompt};

pub mod html;
pub mod http;
pub mod limit;
pub mod mock;
pub mod retry;
pub mod sim;

pub use limit::{InFlightProbe, Limited};
pub use retry::RetryPolicy;

/// Appended to page text cut at the byte cap.
pub const TRUNCATION_MARKER: &str = "\n[truncated]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

impl From<PromptRole> for ChatRole {
    fn from(r: PromptRole) -> Self {
        match r {
            PromptRole::System => Self::System,
            PromptRole::User => Self::User,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    /// Base model id or adapter id understood by the serving backend.
    pub model_or_adapter_id: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f32,
    pub max_tokens: Option<u32>,
    pub request_id: String,
}

impl ChatRequest {
    pub fn new(
        model_or_adapter_id: impl Into<String>,
        messages: Vec<ChatMessage>,
        temperature: f32,
        request_id: impl Into<String>,
    ) -> Result<Self, BackendError> {
        let request_id = request_id.into();
        match messages.first() {
            None => {
                return Err(BackendError::InvalidRequest(format!(
                    "{request_id}: request has no messages"
                )))
            }
            Some(m) if m.role == ChatRole::Assistant => {
                return Err(BackendError::InvalidRequest(format!(
                    "{request_id}: first message must be system or user"
                )))
            }
            _ => {}
        }
        Ok(Self {
            model_or_adapter_id: model_or_adapter_id.into(),
            messages,
            temperature,
            max_tokens: None,
            request_id,
        })
    }

    /// Single-message request carrying a rendered prompt.
    pub fn from_prompt(
        model_or_adapter_id: impl Into<String>,
        prompt: &RenderedPrompt,
        temperature: f32,
        request_id: impl Into<String>,
    ) -> Result<Self, BackendError> {
        let message = ChatMessage {
            role: prompt.role.into(),
            content: prompt.text.clone(),
        };
        Self::new(model_or_adapter_id, vec![message], temperature, request_id)
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = Some(max_tokens);
        self
    }

    /// Message contents joined by newlines.
    pub fn prompt_text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Key used by scripted mocks: SHA-1 hex of [`ChatRequest::prompt_text`].
    pub fn prompt_digest(&self) -> String {
        crate::dedup::sha1_hex(self.prompt_text().as_bytes())
    }
}

/// Model id and decoding parameters shared by a family of calls.
#[derive(Debug, Clone, PartialEq)]
pub struct CallSettings {
    pub model: String,
    pub temperature: f32,
    pub max_tokens: Option<u32>,
}

impl CallSettings {
    pub fn new(model: impl Into<String>, temperature: f32) -> Self {
        Self {
            model: model.into(),
            temperature,
            max_tokens: None,
        }
    }

    pub fn request(&self, prompt: &RenderedPrompt, request_id: impl Into<String>) -> Result<ChatRequest, BackendError> {
        let req = ChatRequest::from_prompt(self.model.clone(), prompt, self.temperature, request_id)?;
        Ok(match self.max_tokens {
            Some(t) => req.with_max_tokens(t),
            None => req,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub request_id: String,
    pub backend_latency: Duration,
    /// Attempts made including the successful one.
    pub attempts: u32,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchResult {
    pub url: String,
    pub title: String,
    pub snippet: String,
    /// 1-based.
    pub rank: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FetchErrorKind {
    Unreachable,
    NonHtml,
    RobotsDisallowed,
}

#[derive(Debug, Clone, Error)]
pub enum BackendError {
    #[error("request {request_id} timed out after {attempts} attempt(s)")]
    Timeout { request_id: String, attempts: u32 },
    #[error("request {request_id} failed with status {status}: {body}")]
    Status {
        request_id: String,
        status: u16,
        body: String,
    },
    #[error("request {request_id} gave up after {attempts} attempts: {last}")]
    RetryExhausted {
        request_id: String,
        attempts: u32,
        last: String,
    },
    #[error("request {request_id}: {message}")]
    Transport { request_id: String, message: String },
    #[error("request {request_id}: malformed backend reply: {message}")]
    Decode { request_id: String, message: String },
    #[error("request {request_id}: no scripted reply for prompt digest {digest}")]
    NotScripted { request_id: String, digest: String },
    #[error("search for {query:?} failed: {message}")]
    Search { query: String, message: String },
    #[error("search quota exceeded while querying {query:?}")]
    QuotaExceeded { query: String },
    #[error("fetching {url} failed ({kind:?}): {message}")]
    Fetch {
        url: String,
        kind: FetchErrorKind,
        message: String,
    },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

#[async_trait]
pub trait ChatBackend: Send + Sync {
    async fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;

    /// Identity recorded in run manifests.
    fn describe(&self) -> String {
        "chat".to_string()
    }
}

#[async_trait]
pub trait SearchBackend: Send + Sync {
    /// Up to `k` results in rank order; an empty list is not an error.
    async fn search(&self, query: &str, k: usize) -> Result<Vec<SearchResult>, BackendError>;

    /// Main text of the page, markup stripped and bounded by the backend's cap.
    async fn fetch_page(&self, url: &str) -> Result<String, BackendError>;

    fn describe(&self) -> String {
        "search".to_string()
    }
}

#[async_trait]
impl<T: ChatBackend + ?Sized> ChatBackend for std::sync::Arc<T> {
    async fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).chat(request).await
    }
    fn describe(&self) -> String {
        (**self).describe()
    }
}

#[async_trait]
impl<T: SearchBackend + ?Sized> SearchBackend for std::sync::Arc<T> {
    async fn search(&self, query: &str, k: usize) -> Result<Vec<SearchResult>, BackendError> {
        (**self).search(query, k).await
    }
    async fn fetch_page(&self, url: &str) -> Result<String, BackendError> {
        (**self).fetch_page(url).await
    }
    fn describe(&self) -> String {
        (**self).describe()
    }
}

/// Cuts `text` to at most `cap` bytes on a char boundary and appends
/// [`TRUNCATION_MARKER`]. Text within the cap is returned unchanged.
pub fn cap_text(text: &str, cap: usize) -> String {
    if text.len() <= cap {
        return text.to_string();
    }
    let mut end = cap;
    while !text.is_char_boundary(end) {
        end -= 1;
    }
    let mut out = text[..end].to_string();
    out.push_str(TRUNCATION_MARKER);
    out
}

/// Assigns 1-based ranks, dropping repeated urls and urls that do not parse.
pub(crate) fn rank_results(raw: impl IntoIterator<Item = (String, String, String)>, k: usize) -> Vec<SearchResult> {
    let mut seen = std::collections::HashSet::new();
    raw.into_iter()
        .filter(|(u, _, _)| url::Url::parse(u).is_ok() && seen.insert(u.clone()))
        .take(k)
        .enumerate()
        .map(|(i, (url, title, snippet))| SearchResult {
            url,
            title,
            snippet,
            rank: i + 1,
        })
        .collect()
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn ranked_results_are_valid_and_increasing(
            raw in prop::collection::vec(("(https://[a-c]\\.example/[a-z]{0,3}|[a-z ]{1,8})", "[a-z]{0,5}"), 0..12),
            k in 1usize..8,
        ) {
            let ranked = rank_results(raw.into_iter().map(|(u, t)| (u, t, String::new())), k);
            prop_assert!(ranked.len() <= k);
            for (i, r) in ranked.iter().enumerate() {
                prop_assert_eq!(r.rank, i + 1);
                prop_assert!(url::Url::parse(&r.url).is_ok());
            }
            let urls: std::collections::HashSet<&str> = ranked.iter().map(|r| r.url.as_str()).collect();
            prop_assert_eq!(urls.len(), ranked.len());
        }
    }
}
