mod common;

use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::routing::post;
use axum::{Json, Router};
use culture_manager::backend::http::HttpChat;
use culture_manager::gateway::{self, Gateway, InferResponse};
use culture_manager::model::{AdapterRef, AnswerFormat, Label, TaskSpec};
use culture_manager::prompts::Templates;
use culture_manager::training::AdapterRegistry;
use serde_json::{json, Value};

async fn spawn(app: Router) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    format!("http://{addr}")
}

type Seen = Arc<Mutex<Vec<(String, String)>>>;

/// Routes on a keyword in the input and answers task prompts with "1", or
/// with chatter when the input asks for it.
async fn model_server(State(seen): State<Seen>, Json(body): Json<Value>) -> Json<Value> {
    let model = body["model"].as_str().unwrap_or_default().to_string();
    let prompt = body["messages"][0]["content"].as_str().unwrap_or_default().to_string();
    seen.lock().unwrap().push((model, prompt.clone()));
    let reply = if prompt.contains("select the most relevant culture") {
        if prompt.contains("istanbul") {
            "Turkish"
        } else if prompt.contains("cairo") {
            "arabic."
        } else {
            "Others"
        }
    } else if prompt.contains("ramble") {
        "I cannot decide."
    } else {
        "1"
    };
    Json(json!({"choices": [{"message": {"content": reply}, "finish_reason": "stop"}]}))
}

async fn stack() -> (String, Seen) {
    let seen: Seen = Arc::default();
    let model_url = spawn(
        Router::new()
            .route("/chat/completions", post(model_server))
            .with_state(seen.clone()),
    )
    .await;
    let mut registry = AdapterRegistry::new();
    registry.insert(AdapterRef::ready(common::culture("Turkish"), "tr-lora", "d-tr").unwrap());
    registry.insert(AdapterRef::ready(common::culture("Arabic"), "ar-lora", "d-ar").unwrap());
    let gw = Gateway::new(
        Arc::new(HttpChat::new(model_url, None)),
        Arc::new(Templates::embedded().clone()),
        vec![common::culture("Arabic"), common::culture("Turkish")],
        vec![TaskSpec::new("offensive", "offensive language detection", AnswerFormat::Binary01).unwrap()],
        "base-8b",
        registry,
    );
    (spawn(gateway::service(Arc::new(gw))).await, seen)
}

#[tokio::test]
async fn infer_over_http_uses_the_routed_adapter() {
    let (url, seen) = stack().await;
    let client = reqwest::Client::new();
    assert_eq!(client.get(format!("{url}/healthz")).send().await.unwrap().text().await.unwrap(), "ok");

    for (text, culture, adapter) in [
        ("istanbul traffic again", "Turkish", Some("tr-lora")),
        ("cairo at night", "Arabic", Some("ar-lora")),
        ("lisbon trams", "Others", None),
    ] {
        seen.lock().unwrap().clear();
        let resp: InferResponse = client
            .post(format!("{url}/infer"))
            .json(&json!({"task_id": "offensive", "text": text}))
            .send()
            .await
            .unwrap()
            .json()
            .await
            .unwrap();
        assert_eq!(resp.label, Label::One);
        assert_eq!(resp.culture, culture);
        assert_eq!(resp.adapter_id.as_deref(), adapter);

        let calls = seen.lock().unwrap().clone();
        assert_eq!(calls.len(), 2, "{text}");
        assert_eq!(calls[0].0, "base-8b", "routing always uses the base model");
        assert_eq!(calls[1].0, adapter.unwrap_or("base-8b"));
        assert!(calls[1].1.contains(text));
    }
}

#[tokio::test]
async fn http_errors_map_to_status_codes() {
    let (url, _) = stack().await;
    let client = reqwest::Client::new();
    let post = |body: Value| client.post(format!("{url}/infer")).json(&body).send();

    assert_eq!(post(json!({"task_id": "nope", "text": "x"})).await.unwrap().status(), 400);
    assert_eq!(post(json!({"task_id": "offensive"})).await.unwrap().status(), 400);
    assert_eq!(
        post(json!({"task_id": "offensive", "question": "q", "text": "t"})).await.unwrap().status(),
        400
    );
    let unparsable = post(json!({"task_id": "offensive", "text": "istanbul ramble"})).await.unwrap();
    assert_eq!(unparsable.status(), 422);
    let body: Value = unparsable.json().await.unwrap();
    assert!(body["error"].as_str().unwrap().contains("I cannot decide"), "{body}");
}
