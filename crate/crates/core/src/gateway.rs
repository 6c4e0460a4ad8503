//! Route, select an adapter, prompt, parse. Shared by batch evaluation and
//! the `POST /infer` service.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::{Arc, RwLock};

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::future::join_all;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, CallSettings, ChatBackend};
use crate::config::ParseMode;
use crate::dedup::sha1_hex;
use crate::model::{AnswerFormat, CultureId, Label, RouteTarget, RoutingDecision, SampleContent, TaskSpec};
use crate::prompts::{PromptError, Templates};
use crate::router::{self, RouterError};
use crate::training::AdapterRegistry;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("no ready adapter registered for culture {0}")]
    MissingAdapter(String),
    #[error("could not parse an answer from {:?}", .trace.raw_reply)]
    Parse { trace: Box<InferenceTrace> },
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

impl From<RouterError> for GatewayError {
    fn from(e: RouterError) -> Self {
        match e {
            RouterError::Backend(b) => GatewayError::Backend(b),
            RouterError::Prompt(p) => GatewayError::Prompt(p),
            RouterError::UnknownGold(g) => GatewayError::Prompt(PromptError::InvalidArgument(g)),
        }
    }
}

/// Extracts a label from a model reply.
///
/// Lenient: the first standalone `0`/`1` token (binary) or `true`/`false`
/// token in any case (true/false) wins. Strict: the whole reply, minus
/// surrounding whitespace and a trailing period, must be the label.
pub fn parse_answer(raw: &str, format: AnswerFormat, mode: ParseMode) -> Option<Label> {
    match mode {
        ParseMode::Strict => {
            let t = raw.trim();
            let t = t.strip_suffix('.').unwrap_or(t);
            format.parse_label(t)
        }
        ParseMode::Lenient => raw
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .find_map(|t| match format {
                AnswerFormat::Binary01 => matches!(t, "0" | "1").then(|| format.parse_label(t)).flatten(),
                AnswerFormat::TrueFalse => format.parse_label(t),
            }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceTrace {
    pub task_id: String,
    pub routing: RoutingDecision,
    /// Model or adapter id the task prompt was sent to.
    pub model_id: String,
    pub adapter_id: Option<String>,
    pub raw_reply: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inference {
    pub label: Label,
    pub trace: InferenceTrace,
}

/// Adapter for a routing decision: the culture's adapter, or `None` (base
/// model) for Others.
pub fn select_adapter<'a>(
    decision: &RoutingDecision,
    registry: &'a AdapterRegistry,
) -> Result<Option<&'a str>, GatewayError> {
    match &decision.chosen {
        RouteTarget::Others => Ok(None),
        RouteTarget::Culture(c) => registry
            .get(c)
            .map(|a| Some(a.backend_adapter_id.as_str()))
            .ok_or_else(|| GatewayError::MissingAdapter(c.to_string())),
    }
}

pub struct Gateway {
    chat: Arc<dyn ChatBackend>,
    templates: Arc<Templates>,
    cultures: Vec<CultureId>,
    tasks: BTreeMap<String, TaskSpec>,
    base_model_id: String,
    registry: RwLock<Arc<AdapterRegistry>>,
    parse_mode: ParseMode,
    router_strict: bool,
}

impl Gateway {
    pub fn new(
        chat: Arc<dyn ChatBackend>,
        templates: Arc<Templates>,
        cultures: Vec<CultureId>,
        tasks: Vec<TaskSpec>,
        base_model_id: impl Into<String>,
        registry: AdapterRegistry,
    ) -> Self {
        Self {
            chat,
            templates,
            cultures,
            tasks: tasks.into_iter().map(|t| (t.id.clone(), t)).collect(),
            base_model_id: base_model_id.into(),
            registry: RwLock::new(Arc::new(registry)),
            parse_mode: ParseMode::Lenient,
            router_strict: false,
        }
    }

    pub fn with_parse_mode(mut self, mode: ParseMode) -> Self {
        self.parse_mode = mode;
        self
    }

    pub fn with_strict_router(mut self, strict: bool) -> Self {
        self.router_strict = strict;
        self
    }

    pub fn registry(&self) -> Arc<AdapterRegistry> {
        self.registry.read().expect("registry lock").clone()
    }

    /// Atomically replaces the registry; in-flight requests keep their snapshot.
    pub fn swap_registry(&self, registry: AdapterRegistry) {
        *self.registry.write().expect("registry lock") = Arc::new(registry);
    }

    pub fn task(&self, id: &str) -> Result<&TaskSpec, GatewayError> {
        self.tasks.get(id).ok_or_else(|| GatewayError::UnknownTask(id.to_string()))
    }

    pub async fn infer(&self, input: &SampleContent, task_id: &str) -> Result<Inference, GatewayError> {
        let task = self.task(task_id)?;
        let registry = self.registry();
        let prompt = self.templates.task(task, input)?;
        let routing = router::route(
            &input.canonical_text(),
            &self.cultures,
            self.chat.as_ref(),
            &self.templates,
            &self.base_model_id,
            self.router_strict,
        )
        .await?;
        let adapter = select_adapter(&routing, &registry)?.map(str::to_string);
        let model_id = adapter.clone().unwrap_or_else(|| self.base_model_id.clone());
        let request_id = format!("infer/{task_id}/{}/{}", model_id, &sha1_hex(prompt.text.as_bytes())[..16]);
        let reply = self
            .chat
            .chat(&CallSettings::new(model_id.clone(), 0.0).request(&prompt, request_id)?)
            .await?;
        let trace = InferenceTrace {
            task_id: task_id.to_string(),
            routing,
            model_id,
            adapter_id: adapter,
            raw_reply: reply.text,
        };
        match parse_answer(&trace.raw_reply, task.answer_format, self.parse_mode) {
            Some(label) => Ok(Inference { label, trace }),
            None => Err(GatewayError::Parse { trace: Box::new(trace) }),
        }
    }

    /// One result per input, in order.
    pub async fn infer_batch(&self, inputs: &[SampleContent], task_id: &str) -> Vec<Result<Inference, GatewayError>> {
        join_all(inputs.iter().map(|i| self.infer(i, task_id))).await
    }

    /// Sends the task prompt straight to the base model, skipping routing.
    pub async fn infer_base(&self, input: &SampleContent, task_id: &str) -> Result<Option<Label>, GatewayError> {
        let task = self.task(task_id)?;
        let prompt = self.templates.task(task, input)?;
        let request_id = format!("base/{task_id}/{}", &sha1_hex(prompt.text.as_bytes())[..16]);
        let reply = self
            .chat
            .chat(&CallSettings::new(self.base_model_id.clone(), 0.0).request(&prompt, request_id)?)
            .await?;
        Ok(parse_answer(&reply.text, task.answer_format, self.parse_mode))
    }
}

/// `POST /infer` body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferRequest {
    pub task_id: String,
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default)]
    pub question: Option<String>,
    #[serde(default)]
    pub answer: Option<String>,
}

impl InferRequest {
    pub fn content(&self) -> Option<SampleContent> {
        match (&self.text, &self.question, &self.answer) {
            (Some(t), None, None) => Some(SampleContent::text(t.clone())),
            (None, Some(q), Some(a)) => Some(SampleContent::qa(q.clone(), a.clone())),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferResponse {
    pub label: Label,
    pub culture: String,
    pub adapter_id: Option<String>,
    pub raw: String,
}

impl From<Inference> for InferResponse {
    fn from(i: Inference) -> Self {
        Self {
            label: i.label,
            culture: i.trace.routing.chosen.name().to_string(),
            adapter_id: i.trace.adapter_id,
            raw: i.trace.raw_reply,
        }
    }
}

fn error_response(e: GatewayError) -> Response {
    let status = match &e {
        GatewayError::UnknownTask(_) | GatewayError::Prompt(_) => StatusCode::BAD_REQUEST,
        GatewayError::Parse { .. } => StatusCode::UNPROCESSABLE_ENTITY,
        GatewayError::MissingAdapter(_) => StatusCode::SERVICE_UNAVAILABLE,
        GatewayError::Backend(_) => StatusCode::BAD_GATEWAY,
    };
    (status, Json(serde_json::json!({ "error": e.to_string() }))).into_response()
}

async fn infer_handler(State(gw): State<Arc<Gateway>>, Json(req): Json<InferRequest>) -> Response {
    let Some(content) = req.content() else {
        return (
            StatusCode::BAD_REQUEST,
            Json(serde_json::json!({"error": "send either text, or question and answer"})),
        )
            .into_response();
    };
    match gw.infer(&content, &req.task_id).await {
        Ok(i) => Json(InferResponse::from(i)).into_response(),
        Err(e) => error_response(e),
    }
}

pub fn service(gateway: Arc<Gateway>) -> Router {
    Router::new()
        .route("/infer", post(infer_handler))
        .route("/healthz", get(|| async { "ok" }))
        .with_state(gateway)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    gateway: Arc<Gateway>,
    addr: SocketAddr,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "gateway listening");
    axum::serve(listener, service(gateway)).with_graceful_shutdown(shutdown).await
}
