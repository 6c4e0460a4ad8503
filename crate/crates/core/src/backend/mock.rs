//! Scripted backends for tests and offline runs.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;

use super::{
    cap_text, BackendError, ChatBackend, ChatRequest, ChatResponse, FetchErrorKind, SearchBackend, SearchResult,
};

/// Chat mock keyed by the SHA-1 hex digest of the full prompt text.
///
/// Unscripted prompts go to the fallback backend when one is set, otherwise
/// they fail with [`BackendError::NotScripted`]. Replies are cached per
/// `request_id`, so replaying a request id returns the first reply.
#[derive(Default)]
pub struct ScriptedChat {
    script: HashMap<String, String>,
    fallback: Option<Arc<dyn ChatBackend>>,
    delay: Option<Duration>,
    calls: Mutex<Vec<ChatRequest>>,
    by_request: Mutex<HashMap<String, String>>,
}

impl ScriptedChat {
    pub fn new() -> Self {
        Self::default()
    }

    /// Loads a JSON object mapping prompt digests to reply text.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path)
            .map_err(|e| BackendError::InvalidRequest(format!("mock script {}: {e}", path.display())))?;
        let script: BTreeMap<String, String> = serde_json::from_str(&raw)
            .map_err(|e| BackendError::InvalidRequest(format!("mock script {}: {e}", path.display())))?;
        let mut chat = Self::new();
        for (digest, reply) in script {
            chat.script.insert(digest.to_ascii_lowercase(), reply);
        }
        Ok(chat)
    }

    /// Scripts the reply for an exact prompt text.
    pub fn with_reply(mut self, prompt_text: &str, reply: impl Into<String>) -> Self {
        self.script
            .insert(crate::dedup::sha1_hex(prompt_text.as_bytes()), reply.into());
        self
    }

    pub fn with_digest_reply(mut self, digest: impl Into<String>, reply: impl Into<String>) -> Self {
        self.script.insert(digest.into().to_ascii_lowercase(), reply.into());
        self
    }

    pub fn with_fallback(mut self, fallback: Arc<dyn ChatBackend>) -> Self {
        self.fallback = Some(fallback);
        self
    }

    /// Artificial latency per call.
    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = Some(delay);
        self
    }

    /// Every request received, in arrival order.
    pub fn calls(&self) -> Vec<ChatRequest> {
        self.calls.lock().expect("calls lock").clone()
    }

    pub fn call_count(&self) -> usize {
        self.calls.lock().expect("calls lock").len()
    }
}

#[async_trait]
impl ChatBackend for ScriptedChat {
    async fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.calls.lock().expect("calls lock").push(request.clone());
        if let Some(d) = self.delay {
            tokio::time::sleep(d).await;
        }
        let cached = self
            .by_request
            .lock()
            .expect("cache lock")
            .get(&request.request_id)
            .cloned();
        let text = match cached {
            Some(t) => t,
            None => {
                let digest = request.prompt_digest();
                let text = match (self.script.get(&digest), &self.fallback) {
                    (Some(reply), _) => reply.clone(),
                    (None, Some(fb)) => fb.chat(request).await?.text,
                    (None, None) => {
                        return Err(BackendError::NotScripted {
                            request_id: request.request_id.clone(),
                            digest,
                        })
                    }
                };
                self.by_request
                    .lock()
                    .expect("cache lock")
                    .insert(request.request_id.clone(), text.clone());
                text
            }
        };
        Ok(ChatResponse {
            text,
            request_id: request.request_id.clone(),
            backend_latency: Duration::ZERO,
            attempts: 1,
            truncated: false,
        })
    }

    fn describe(&self) -> String {
        match &self.fallback {
            Some(fb) => format!("scripted-chat({} entries) -> {}", self.script.len(), fb.describe()),
            None => format!("scripted-chat({} entries)", self.script.len()),
        }
    }
}

/// Search mock with canned result lists and a url to body table.
///
/// Unknown queries yield no results; unknown urls are unreachable.
#[derive(Default)]
pub struct MockSearch {
    results: HashMap<String, Vec<SearchResult>>,
    pages: HashMap<String, String>,
    unreachable: HashSet<String>,
    page_cap: Option<usize>,
    fallback: Option<Arc<dyn SearchBackend>>,
    fetches: Mutex<Vec<String>>,
}

impl MockSearch {
    pub fn new() -> Self {
        Self::default()
    }

    /// Results for `query`; ranks are reassigned 1..=n in the given order.
    pub fn with_results(mut self, query: impl Into<String>, urls: &[(&str, &str)]) -> Self {
        let results = urls
            .iter()
            .enumerate()
            .map(|(i, (url, title))| SearchResult {
                url: url.to_string(),
                title: title.to_string(),
                snippet: String::new(),
                rank: i + 1,
            })
            .collect();
        self.results.insert(query.into(), results);
        self
    }

    pub fn with_page(mut self, url: impl Into<String>, body: impl Into<String>) -> Self {
        self.pages.insert(url.into(), body.into());
        self
    }

    pub fn with_unreachable(mut self, url: impl Into<String>) -> Self {
        self.unreachable.insert(url.into());
        self
    }

    pub fn with_page_cap(mut self, bytes: usize) -> Self {
        self.page_cap = Some(bytes);
        self
    }

    pub fn with_fallback(mut self, fallback: Arc<dyn SearchBackend>) -> Self {
        self.fallback = Some(fallback);
        self
    }

    pub fn fetched(&self) -> Vec<String> {
        self.fetches.lock().expect("fetch log").clone()
    }
}

#[async_trait]
impl SearchBackend for MockSearch {
    async fn search(&self, query: &str, k: usize) -> Result<Vec<SearchResult>, BackendError> {
        if k == 0 {
            return Err(BackendError::InvalidRequest("k must be at least 1".into()));
        }
        match (self.results.get(query), &self.fallback) {
            (Some(r), _) => Ok(r.iter().take(k).cloned().collect()),
            (None, Some(fb)) => fb.search(query, k).await,
            (None, None) => Ok(Vec::new()),
        }
    }

    async fn fetch_page(&self, url: &str) -> Result<String, BackendError> {
        self.fetches.lock().expect("fetch log").push(url.to_string());
        if self.unreachable.contains(url) {
            return Err(BackendError::Fetch {
                url: url.to_string(),
                kind: FetchErrorKind::Unreachable,
                message: "scripted as unreachable".into(),
            });
        }
        let body = match (self.pages.get(url), &self.fallback) {
            (Some(b), _) => b.clone(),
            (None, Some(fb)) => return fb.fetch_page(url).await,
            (None, None) => {
                return Err(BackendError::Fetch {
                    url: url.to_string(),
                    kind: FetchErrorKind::Unreachable,
                    message: "no scripted page".into(),
                })
            }
        };
        Ok(match self.page_cap {
            Some(cap) => cap_text(&body, cap),
            None => body,
        })
    }

    fn describe(&self) -> String {
        format!("mock-search({} queries, {} pages)", self.results.len(), self.pages.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ChatMessage, ChatRole, TRUNCATION_MARKER};

    fn req(text: &str, id: &str) -> ChatRequest {
        let msg = ChatMessage {
            role: ChatRole::User,
            content: text.into(),
        };
        ChatRequest::new("base", vec![msg], 0.0, id).unwrap()
    }

    #[tokio::test]
    async fn scripted_reply_by_digest() {
        let chat = ScriptedChat::new().with_reply("hello", "### q1\n### q2");
        let r = chat.chat(&req("hello", "r1")).await.unwrap();
        assert_eq!(r.text, "### q1\n### q2");
        let miss = chat.chat(&req("other", "r2")).await.unwrap_err();
        assert!(matches!(miss, BackendError::NotScripted { .. }));
    }

    #[tokio::test]
    async fn replies_are_idempotent_per_request_id() {
        let chat = ScriptedChat::new().with_reply("a", "A").with_reply("b", "B");
        assert_eq!(chat.chat(&req("a", "same")).await.unwrap().text, "A");
        assert_eq!(chat.chat(&req("b", "same")).await.unwrap().text, "A");
        assert_eq!(chat.call_count(), 2);
    }

    #[tokio::test]
    async fn script_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("script.json");
        let digest = crate::dedup::sha1_hex(b"prompt");
        std::fs::write(&path, format!("{{\"{digest}\": \"reply\"}}")).unwrap();
        let chat = ScriptedChat::from_file(&path).unwrap();
        assert_eq!(chat.chat(&req("prompt", "r")).await.unwrap().text, "reply");
    }

    #[tokio::test]
    async fn search_truncates_to_k() {
        let s = MockSearch::new().with_results(
            "q",
            &[("https://1.example", "1"), ("https://2.example", "2"), ("https://3.example", "3"),
              ("https://4.example", "4"), ("https://5.example", "5")],
        );
        let r = s.search("q", 3).await.unwrap();
        assert_eq!(r.iter().map(|x| x.rank).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(s.search("q", 1).await.unwrap().len() <= 1);
        assert!(s.search("nothing", 3).await.unwrap().is_empty());
    }

    #[tokio::test]
    async fn fetch_contracts() {
        let s = MockSearch::new()
            .with_page("https://a.example", "exact body")
            .with_page("https://big.example", "x".repeat(50))
            .with_unreachable("https://down.example")
            .with_page_cap(20);
        assert_eq!(s.fetch_page("https://a.example").await.unwrap(), "exact body");
        let big = s.fetch_page("https://big.example").await.unwrap();
        assert!(big.ends_with(TRUNCATION_MARKER));
        match s.fetch_page("https://down.example").await.unwrap_err() {
            BackendError::Fetch { url, kind, .. } => {
                assert_eq!(url, "https://down.example");
                assert_eq!(kind, FetchErrorKind::Unreachable);
            }
            other => panic!("{other:?}"),
        }
    }
}
