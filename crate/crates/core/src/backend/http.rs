//! HTTP implementations of the chat and search contracts.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;

use super::retry::{self, AttemptError, RetryPolicy};
use super::{
    cap_text, html, rank_results, BackendError, ChatBackend, ChatRequest, ChatResponse, FetchErrorKind,
    SearchBackend, SearchResult,
};

fn is_transient(status: StatusCode) -> bool {
    status == StatusCode::TOO_MANY_REQUESTS || status == StatusCode::REQUEST_TIMEOUT || status.is_server_error()
}

/// Reads an API key from the environment variable named in config.
pub fn api_key_from_env(var: Option<&str>) -> Result<Option<String>, BackendError> {
    match var {
        None => Ok(None),
        Some(name) => std::env::var(name)
            .map(Some)
            .map_err(|_| BackendError::InvalidRequest(format!("environment variable {name} is not set"))),
    }
}

/// Client for any chat-completions compatible endpoint.
#[derive(Debug, Clone)]
pub struct HttpChat {
    client: reqwest::Client,
    /// Base url; `/chat/completions` is appended.
    base_url: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    timeout: Duration,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [super::ChatMessage],
    temperature: f32,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

impl HttpChat {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            client: reqwest::Client::new(),
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
            retry: RetryPolicy::default(),
            timeout: Duration::from_secs(120),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    async fn attempt(&self, request: &ChatRequest) -> Result<(String, bool), AttemptError> {
        let body = WireRequest {
            model: &request.model_or_adapter_id,
            messages: &request.messages,
            temperature: request.temperature,
            max_tokens: request.max_tokens,
        };
        let mut builder = self
            .client
            .post(format!("{}/chat/completions", self.base_url))
            .timeout(self.timeout)
            .header("x-request-id", &request.request_id)
            .json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = builder.send().await.map_err(|e| {
            if e.is_timeout() {
                AttemptError::TimedOut
            } else {
                AttemptError::Transient(e.to_string())
            }
        })?;
        let status = resp.status();
        if !status.is_success() {
            let text = resp.text().await.unwrap_or_default();
            return Err(if is_transient(status) {
                AttemptError::Transient(format!("status {status}"))
            } else {
                AttemptError::Fatal(BackendError::Status {
                    request_id: request.request_id.clone(),
                    status: status.as_u16(),
                    body: text,
                })
            });
        }
        let decode = |message: String| {
            AttemptError::Fatal(BackendError::Decode {
                request_id: request.request_id.clone(),
                message,
            })
        };
        let wire: WireResponse = resp.json().await.map_err(|e| decode(e.to_string()))?;
        let choice = wire
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| decode("no choices".into()))?;
        let truncated = choice.finish_reason.as_deref() == Some("length");
        let text = choice.message.content.unwrap_or_default();
        if text.is_empty() && !truncated {
            return Err(decode("empty completion".into()));
        }
        Ok((text, truncated))
    }
}

#[async_trait]
impl ChatBackend for HttpChat {
    async fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let started = Instant::now();
        let ((text, truncated), attempts) =
            retry::run(&self.retry, &request.request_id, |_| self.attempt(request)).await?;
        Ok(ChatResponse {
            text,
            request_id: request.request_id.clone(),
            backend_latency: started.elapsed(),
            attempts,
            truncated,
        })
    }

    fn describe(&self) -> String {
        format!("http-chat {}", self.base_url)
    }
}

/// Search over a JSON endpoint plus direct page fetching.
///
/// The endpoint receives `POST {"q": query, "num": k}` and answers with
/// `{"results": [{"url", "title", "snippet"}]}`; the Custom Search style
/// `{"items": [{"link", ...}]}` is accepted too.
#[derive(Debug)]
pub struct HttpSearch {
    client: reqwest::Client,
    endpoint: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    page_cap: usize,
    respect_robots: bool,
    user_agent: String,
    robots: Mutex<HashMap<String, Vec<String>>>,
}

#[derive(Deserialize)]
struct WireSearch {
    #[serde(alias = "items", default)]
    results: Vec<WireHit>,
}

#[derive(Deserialize)]
struct WireHit {
    #[serde(alias = "link")]
    url: String,
    #[serde(default)]
    title: String,
    #[serde(default)]
    snippet: String,
}

impl HttpSearch {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            client: reqwest::Client::builder()
                .timeout(Duration::from_secs(30))
                .build()
                .expect("reqwest client"),
            endpoint: endpoint.into(),
            api_key,
            retry: RetryPolicy::default(),
            page_cap: 64 * 1024,
            respect_robots: true,
            user_agent: "culture-manager".to_string(),
            robots: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_page_cap(mut self, bytes: usize) -> Self {
        self.page_cap = bytes;
        self
    }

    pub fn respect_robots(mut self, on: bool) -> Self {
        self.respect_robots = on;
        self
    }

    async fn disallowed_prefixes(&self, origin: &str) -> Vec<String> {
        if let Some(cached) = self.robots.lock().await.get(origin) {
            return cached.clone();
        }
        let rules = match self.client.get(format!("{origin}/robots.txt")).send().await {
            Ok(r) if r.status().is_success() => parse_robots(&r.text().await.unwrap_or_default()),
            _ => Vec::new(),
        };
        self.robots.lock().await.insert(origin.to_string(), rules.clone());
        rules
    }
}

/// `Disallow` prefixes from the `User-agent: *` groups of a robots.txt.
pub fn parse_robots(body: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut applies = false;
    let mut in_agents = false;
    for line in body.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        let Some((key, value)) = line.split_once(':') else {
            continue;
        };
        let (key, value) = (key.trim().to_ascii_lowercase(), value.trim());
        match key.as_str() {
            "user-agent" => {
                if !in_agents {
                    applies = false;
                }
                in_agents = true;
                applies |= value == "*";
            }
            "disallow" => {
                in_agents = false;
                if applies && !value.is_empty() {
                    out.push(value.to_string());
                }
            }
            _ => in_agents = false,
        }
    }
    out
}

#[async_trait]
impl SearchBackend for HttpSearch {
    async fn search(&self, query: &str, k: usize) -> Result<Vec<SearchResult>, BackendError> {
        if k == 0 {
            return Err(BackendError::InvalidRequest("k must be at least 1".into()));
        }
        let attempt = |_| async {
            let mut builder = self
                .client
                .post(&self.endpoint)
                .json(&serde_json::json!({ "q": query, "num": k }));
            if let Some(key) = &self.api_key {
                builder = builder.bearer_auth(key);
            }
            let resp = builder
                .send()
                .await
                .map_err(|e| if e.is_timeout() { AttemptError::TimedOut } else { AttemptError::Transient(e.to_string()) })?;
            let status = resp.status();
            if status == StatusCode::TOO_MANY_REQUESTS {
                return Err(AttemptError::Fatal(BackendError::QuotaExceeded { query: query.to_string() }));
            }
            if status.is_server_error() {
                return Err(AttemptError::Transient(format!("status {status}")));
            }
            if !status.is_success() {
                return Err(AttemptError::Fatal(BackendError::Search {
                    query: query.to_string(),
                    message: format!("status {status}"),
                }));
            }
            resp.json::<WireSearch>().await.map_err(|e| {
                AttemptError::Fatal(BackendError::Search {
                    query: query.to_string(),
                    message: e.to_string(),
                })
            })
        };
        let (wire, _) = retry::run(&self.retry, query, attempt).await?;
        Ok(rank_results(
            wire.results.into_iter().map(|h| (h.url, h.title, h.snippet)),
            k,
        ))
    }

    async fn fetch_page(&self, url: &str) -> Result<String, BackendError> {
        let fail = |kind, message: String| BackendError::Fetch {
            url: url.to_string(),
            kind,
            message,
        };
        let parsed = url::Url::parse(url).map_err(|e| fail(FetchErrorKind::Unreachable, e.to_string()))?;
        if self.respect_robots {
            let origin = parsed.origin().ascii_serialization();
            let path = parsed.path();
            if self
                .disallowed_prefixes(&origin)
                .await
                .iter()
                .any(|p| path.starts_with(p.as_str()))
            {
                return Err(fail(FetchErrorKind::RobotsDisallowed, "disallowed by robots.txt".into()));
            }
        }
        let resp = self
            .client
            .get(parsed)
            .header(reqwest::header::USER_AGENT, &self.user_agent)
            .send()
            .await
            .map_err(|e| fail(FetchErrorKind::Unreachable, e.to_string()))?;
        if !resp.status().is_success() {
            return Err(fail(FetchErrorKind::Unreachable, format!("status {}", resp.status())));
        }
        let content_type = resp
            .headers()
            .get(reqwest::header::CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .unwrap_or("text/html")
            .to_ascii_lowercase();
        let body = resp
            .text()
            .await
            .map_err(|e| fail(FetchErrorKind::Unreachable, e.to_string()))?;
        let text = if content_type.contains("html") {
            html::extract_text(&body)
        } else if content_type.starts_with("text/plain") {
            body
        } else {
            return Err(fail(FetchErrorKind::NonHtml, content_type));
        };
        Ok(cap_text(&text, self.page_cap))
    }

    fn describe(&self) -> String {
        format!("http-search {}", self.endpoint)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn robots_groups() {
        let body = "User-agent: googlebot\nDisallow: /g\n\nUser-agent: other\nUser-agent: *\nDisallow: /private # note\nDisallow:\nAllow: /x\n";
        assert_eq!(parse_robots(body), vec!["/private".to_string()]);
    }
}
