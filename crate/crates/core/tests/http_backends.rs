use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use culture_manager::backend::http::{HttpChat, HttpSearch};
use culture_manager::backend::retry::RetryPolicy;
use culture_manager::backend::{BackendError, ChatBackend, ChatMessage, ChatRequest, ChatRole, SearchBackend};
use culture_manager::model::{AdapterStatus, CultureId};
use culture_manager::training::{
    submit_staged_training, submit_training, HttpTrainer, JobRequest, TrainError, TrainOptions,
};
use serde_json::{json, Value};

async fn spawn(app: Router) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr: SocketAddr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    format!("http://{addr}")
}

fn fast_retry(max_retries: u32) -> RetryPolicy {
    RetryPolicy {
        max_retries,
        initial_backoff: Duration::from_millis(5),
        max_backoff: Duration::from_millis(20),
        multiplier: 2.0,
    }
}

fn request() -> ChatRequest {
    let msg = ChatMessage {
        role: ChatRole::User,
        content: "Answer with 1 or 0.".into(),
    };
    ChatRequest::new("llama-3.1-8b-instruct", vec![msg], 0.0, "t/1").unwrap()
}

#[derive(Clone, Default)]
struct ChatState {
    hits: Arc<AtomicUsize>,
    fail_first: usize,
    bodies: Arc<Mutex<Vec<(Value, Option<String>)>>>,
}

async fn completions(State(s): State<ChatState>, headers: HeaderMap, Json(body): Json<Value>) -> impl IntoResponse {
    let n = s.hits.fetch_add(1, Ordering::SeqCst);
    let auth = headers
        .get("authorization")
        .and_then(|v| v.to_str().ok())
        .map(str::to_string);
    s.bodies.lock().unwrap().push((body, auth));
    if n < s.fail_first {
        return (StatusCode::TOO_MANY_REQUESTS, Json(json!({"error": "slow down"})));
    }
    (
        StatusCode::OK,
        Json(json!({"choices": [{"message": {"content": "1"}, "finish_reason": "stop"}]})),
    )
}

async fn chat_server(fail_first: usize) -> (String, ChatState) {
    let state = ChatState {
        fail_first,
        ..ChatState::default()
    };
    let app = Router::new()
        .route("/v1/chat/completions", post(completions))
        .with_state(state.clone());
    (format!("{}/v1", spawn(app).await), state)
}

#[tokio::test]
async fn chat_retries_rate_limits_then_succeeds() {
    let (url, state) = chat_server(2).await;
    let chat = HttpChat::new(url, Some("sk-test".into())).with_retry(fast_retry(3));
    let reply = chat.chat(&request()).await.unwrap();
    assert_eq!(reply.text, "1");
    assert_eq!(reply.attempts, 3);
    assert!(!reply.truncated);
    assert_eq!(state.hits.load(Ordering::SeqCst), 3);

    let bodies = state.bodies.lock().unwrap();
    let (body, auth) = &bodies[0];
    assert_eq!(body["model"], "llama-3.1-8b-instruct");
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["messages"][0]["role"], "user");
    assert_eq!(auth.as_deref(), Some("Bearer sk-test"));
}

#[tokio::test]
async fn chat_gives_up_after_the_retry_cap() {
    let (url, state) = chat_server(usize::MAX).await;
    let chat = HttpChat::new(url, None).with_retry(fast_retry(2));
    match chat.chat(&request()).await {
        Err(BackendError::RetryExhausted { attempts, request_id, .. }) => {
            assert_eq!(attempts, 3);
            assert_eq!(request_id, "t/1");
        }
        other => panic!("expected exhaustion, got {other:?}"),
    }
    assert_eq!(state.hits.load(Ordering::SeqCst), 3);
    assert!(state.bodies.lock().unwrap().iter().all(|(_, a)| a.is_none()));
}

#[tokio::test]
async fn client_errors_are_not_retried() {
    let hits = Arc::new(AtomicUsize::new(0));
    let h = hits.clone();
    let app = Router::new().route(
        "/chat/completions",
        post(move || {
            let h = h.clone();
            async move {
                h.fetch_add(1, Ordering::SeqCst);
                (StatusCode::BAD_REQUEST, "unknown model")
            }
        }),
    );
    let chat = HttpChat::new(spawn(app).await, None).with_retry(fast_retry(3));
    let err = chat.chat(&request()).await.unwrap_err();
    assert!(matches!(err, BackendError::Status { status: 400, .. }), "{err:?}");
    assert_eq!(hits.load(Ordering::SeqCst), 1);
}

#[tokio::test]
async fn truncated_reply_is_flagged() {
    let app = Router::new().route(
        "/chat/completions",
        post(|| async { Json(json!({"choices": [{"message": {"content": "Input: half"}, "finish_reason": "length"}]})) }),
    );
    let chat = HttpChat::new(spawn(app).await, None);
    let reply = chat.chat(&request()).await.unwrap();
    assert!(reply.truncated);
    assert_eq!(reply.attempts, 1);
}

#[tokio::test]
async fn search_ranks_hits_and_fetches_pages() {
    let app = Router::new()
        .route(
            "/search",
            post(|Json(q): Json<Value>| async move {
                assert_eq!(q["num"], 2);
                Json(json!({"results": [
                    {"url": "https://a.example/x", "title": "A", "snippet": "first"},
                    {"url": "https://a.example/x", "title": "A again", "snippet": "dup"},
                    {"url": "https://b.example/y", "title": "B", "snippet": "second"},
                    {"url": "https://c.example/z", "title": "C", "snippet": "third"}
                ]}))
            }),
        )
        .route(
            "/page",
            get(|| async {
                (
                    [("content-type", "text/html; charset=utf-8")],
                    "<html><head><script>var x = 1;</script></head><body><p>Kahve falı</p></body></html>",
                )
            }),
        );
    let base = spawn(app).await;
    let search = HttpSearch::new(format!("{base}/search"), None).respect_robots(false);
    let hits = search.search("Turkish coffee", 2).await.unwrap();
    let urls: Vec<&str> = hits.iter().map(|h| h.url.as_str()).collect();
    assert_eq!(urls, ["https://a.example/x", "https://b.example/y"]);

    let page = search.fetch_page(&format!("{base}/page")).await.unwrap();
    assert!(page.contains("Kahve falı"));
    assert!(!page.contains("var x"));
}

#[tokio::test]
async fn search_quota_is_fatal() {
    let app = Router::new().route("/search", post(|| async { StatusCode::TOO_MANY_REQUESTS }));
    let search = HttpSearch::new(format!("{}/search", spawn(app).await), None).with_retry(fast_retry(3));
    assert!(matches!(
        search.search("q", 3).await,
        Err(BackendError::QuotaExceeded { .. })
    ));
}

#[derive(Clone, Default)]
struct TrainerState {
    submitted: Arc<Mutex<Vec<JobRequest>>>,
    polls: Arc<Mutex<BTreeMap<String, usize>>>,
    fail_stage: Option<usize>,
}

async fn create_job(State(s): State<TrainerState>, Json(req): Json<JobRequest>) -> impl IntoResponse {
    if req.records.as_ref().map_or(true, Vec::is_empty) {
        return (StatusCode::UNPROCESSABLE_ENTITY, Json(json!({"error": "empty dataset"})));
    }
    let mut submitted = s.submitted.lock().unwrap();
    submitted.push(req);
    (StatusCode::OK, Json(json!({"job_id": format!("job-{}", submitted.len())})))
}

async fn job_status(State(s): State<TrainerState>, Path(id): Path<String>) -> impl IntoResponse {
    let Some(n) = id.strip_prefix("job-").and_then(|n| n.parse::<usize>().ok()) else {
        return (StatusCode::NOT_FOUND, Json(json!({})));
    };
    if n > s.submitted.lock().unwrap().len() {
        return (StatusCode::NOT_FOUND, Json(json!({})));
    }
    let mut polls = s.polls.lock().unwrap();
    let seen = polls.entry(id.clone()).or_default();
    *seen += 1;
    let body = match *seen {
        1 => json!({"status": "pending"}),
        2 => json!({"status": "training"}),
        _ if s.fail_stage == Some(n) => json!({"status": "failed", "diagnostics": {"loss": "nan"}}),
        _ => json!({"status": "ready", "adapter_id": format!("adapter-{n}")}),
    };
    (StatusCode::OK, Json(body))
}

async fn trainer_server(fail_stage: Option<usize>) -> (String, TrainerState) {
    let state = TrainerState {
        fail_stage,
        ..TrainerState::default()
    };
    let app = Router::new()
        .route("/jobs", post(create_job))
        .route("/jobs/:id", get(job_status))
        .with_state(state.clone());
    (spawn(app).await, state)
}

fn dataset(dir: &std::path::Path, name: &str, lines: &[&str]) -> PathBuf {
    let path = dir.join(name);
    let body: String = lines
        .iter()
        .enumerate()
        .map(|(i, t)| format!("{}\n", json!({"id": i, "text": t, "label": "1"})))
        .collect();
    std::fs::write(&path, body).unwrap();
    path
}

fn opts() -> TrainOptions {
    let mut o = TrainOptions::new("llama-3.1-8b-instruct");
    o.poll_interval = Duration::from_millis(2);
    o.timeout = Duration::from_secs(5);
    o
}

#[tokio::test]
async fn trainer_contract_single_stage() {
    let (url, state) = trainer_server(None).await;
    let dir = tempfile::tempdir().unwrap();
    let path = dataset(dir.path(), "tr.jsonl", &["a", "b"]);
    let digest = culture_manager::store::file_digest(&path).unwrap();
    let trainer = HttpTrainer::new(url, None);
    let turkish = CultureId::new("Turkish").unwrap();

    let job = submit_training(&turkish, &path, &digest, &trainer, &opts()).await.unwrap();
    assert_eq!(job.status, AdapterStatus::Ready);
    assert_eq!(job.backend_adapter_id.as_deref(), Some("adapter-1"));
    let adapter = job.adapter_ref().unwrap();
    assert_eq!(adapter.trained_on_digest, digest);

    let sent = state.submitted.lock().unwrap();
    assert_eq!(sent.len(), 1);
    assert_eq!(sent[0].culture, "Turkish");
    assert_eq!(sent[0].dataset_digest, digest);
    assert_eq!(sent[0].records.as_ref().unwrap().len(), 2);
    assert!(sent[0].init_adapter_id.is_none());
}

#[tokio::test]
async fn staged_training_chains_adapters() {
    let (url, state) = trainer_server(None).await;
    let dir = tempfile::tempdir().unwrap();
    let stages = vec![
        dataset(dir.path(), "agnostic.jsonl", &["general"]),
        dataset(dir.path(), "specific.jsonl", &["task"]),
    ];
    let trainer = HttpTrainer::new(url, None);
    let arabic = CultureId::new("Arabic").unwrap();
    let job = submit_staged_training(&arabic, &stages, &trainer, &opts()).await.unwrap();

    assert_eq!(job.job_ids, ["job-1", "job-2"]);
    assert_eq!(job.backend_adapter_id.as_deref(), Some("adapter-2"));
    assert_eq!(job.trained_on_digest(), culture_manager::store::file_digest(&stages[1]).unwrap());
    let sent = state.submitted.lock().unwrap();
    assert_eq!(sent[0].init_adapter_id, None);
    assert_eq!(sent[1].init_adapter_id.as_deref(), Some("adapter-1"));
}

#[tokio::test]
async fn failed_stage_reports_diagnostics() {
    let (url, _) = trainer_server(Some(2)).await;
    let dir = tempfile::tempdir().unwrap();
    let stages = vec![
        dataset(dir.path(), "s1.jsonl", &["one"]),
        dataset(dir.path(), "s2.jsonl", &["two"]),
    ];
    let trainer = HttpTrainer::new(url, None);
    let arabic = CultureId::new("Arabic").unwrap();
    match submit_staged_training(&arabic, &stages, &trainer, &opts()).await {
        Err(TrainError::StageFailed { stage, source, .. }) => {
            assert_eq!(stage, 1);
            assert!(source.to_string().contains("nan"), "{source}");
        }
        other => panic!("expected stage failure, got {other:?}"),
    }
}

#[tokio::test]
async fn rejected_submission_and_unknown_job() {
    let (url, _) = trainer_server(None).await;
    let dir = tempfile::tempdir().unwrap();
    let empty = dataset(dir.path(), "empty.jsonl", &[]);
    let digest = culture_manager::store::file_digest(&empty).unwrap();
    let trainer = HttpTrainer::new(url, None);
    let turkish = CultureId::new("Turkish").unwrap();
    let err = submit_training(&turkish, &empty, &digest, &trainer, &opts()).await.unwrap_err();
    assert!(matches!(err, TrainError::Rejected { status: 422, .. }), "{err:?}");

    use culture_manager::training::Trainer;
    assert!(matches!(trainer.status("job-99").await, Err(TrainError::UnknownJob(_))));
}

#[tokio::test]
async fn digest_mismatch_blocks_submission() {
    let (url, state) = trainer_server(None).await;
    let dir = tempfile::tempdir().unwrap();
    let path = dataset(dir.path(), "tr.jsonl", &["a"]);
    let trainer = HttpTrainer::new(url, None);
    let turkish = CultureId::new("Turkish").unwrap();
    let err = submit_training(&turkish, &path, "deadbeef", &trainer, &opts()).await.unwrap_err();
    assert!(matches!(err, TrainError::DigestMismatch { .. }));
    assert!(state.submitted.lock().unwrap().is_empty());
}
