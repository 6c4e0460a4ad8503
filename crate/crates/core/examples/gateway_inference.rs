//! Serves the inference gateway over HTTP on a local port, with the
//! simulator standing in for the model server, and sends a few requests.
//!
//!     cargo run --example gateway_inference

use std::sync::Arc;

use culture_manager::backend::sim::SimulatedChat;
use culture_manager::gateway::{self, Gateway, InferResponse};
use culture_manager::model::{AdapterRef, AnswerFormat, CultureId, TaskSpec};
use culture_manager::prompts::Templates;
use culture_manager::training::AdapterRegistry;

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cultures = vec![CultureId::new("Arabic")?, CultureId::new("Turkish")?];
    let mut registry = AdapterRegistry::new();
    registry.insert(AdapterRef::ready(cultures[0].clone(), "lora-arabic", "d-ar")?);
    registry.insert(AdapterRef::ready(cultures[1].clone(), "lora-turkish", "d-tr")?);
    let chat = SimulatedChat::new(7).with_base_model("llama-3.1-8b-instruct");
    let gw = Gateway::new(
        Arc::new(chat),
        Arc::new(Templates::embedded().clone()),
        cultures,
        vec![TaskSpec::new("offensive", "offensive language detection", AnswerFormat::Binary01)?],
        "llama-3.1-8b-instruct",
        registry,
    );

    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
    let url = format!("http://{}", listener.local_addr()?);
    tokio::spawn(async move { axum::serve(listener, gateway::service(Arc::new(gw))).await });

    let client = reqwest::Client::new();
    println!("healthz: {}", client.get(format!("{url}/healthz")).send().await?.text().await?);
    for text in ["Turkish fans booed the referee", "An Arabic proverb about patience", "A quiet day in Lisbon"] {
        let resp: InferResponse = client
            .post(format!("{url}/infer"))
            .json(&serde_json::json!({"task_id": "offensive", "text": text}))
            .send()
            .await?
            .json()
            .await?;
        println!(
            "{text:<34} culture={:<8} adapter={:<13} label={}",
            resp.culture,
            resp.adapter_id.as_deref().unwrap_or("(base)"),
            resp.label
        );
    }
    Ok(())
}
