//! Runs query generation, retrieval and synthesis against the offline
//! simulator and writes the per-culture datasets.
//!
//!     cargo run --example synthesize_mock

use culture_manager::config::PipelineConfig;
use culture_manager::model::QueryMode;
use culture_manager::pipeline::{self, Backends};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = PipelineConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/data/pipeline.toml"))?;
    cfg.paths.root = cfg.paths.root.join("synthesize_mock");
    let backends = Backends::from_config(&cfg)?;
    let templates = pipeline::templates(&cfg)?;
    let modes = [QueryMode::TaskSpecific, QueryMode::TaskAgnostic];

    let out = pipeline::run_pipeline(&cfg, &modes, &backends, &templates, true).await;
    let run = out.result?;
    println!("{}", run.summary());
    for (mode, c) in &run.per_mode {
        println!("  {mode}: {} queries, {} materials, {} samples", c.queries, c.materials, c.samples);
    }
    for (key, digest) in &out.manifest.dataset_digests {
        println!("  {key:<22} {digest}");
    }
    if let Some(report) = &out.leakage {
        println!("leakage: {}", report.summary());
    }
    if let Some(first) = run.samples.first() {
        println!("first sample: {} -> {}", first.content.canonical_text(), first.label);
    }
    println!("manifest: {}", out.manifest_path.map(|p| p.display().to_string()).unwrap_or_default());
    Ok(())
}
