//! Two-stage adaptation: train on the task-agnostic corpus, then continue
//! from that adapter on the task-specific corpus. Uses the in-process mock
//! trainer; point `HttpTrainer` at a real service to do the same remotely.
//!
//!     cargo run --example staged_training

use culture_manager::config::PipelineConfig;
use culture_manager::model::QueryMode;
use culture_manager::pipeline::{self, Backends};
use culture_manager::training::{submit_staged_training, MockTrainer};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let base = PipelineConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/data/pipeline.toml"))?;
    let templates = pipeline::templates(&base)?;
    let mut stage_roots = Vec::new();
    for mode in [QueryMode::TaskAgnostic, QueryMode::TaskSpecific] {
        let mut cfg = base.clone();
        cfg.paths.root = base.paths.root.join("staged_training").join(mode.as_str());
        let backends = Backends::from_config(&cfg)?;
        let run = pipeline::run_pipeline(&cfg, &[mode], &backends, &templates, true).await.result?;
        println!("stage {mode}: {}", run.sample_summary());
        stage_roots.push(pipeline::layout(&cfg));
    }

    let trainer = MockTrainer::new().with_polls(2);
    let opts = pipeline::train_options(&base);
    for culture in base.culture_ids() {
        let stages: Vec<_> = stage_roots.iter().map(|l| l.culture_dataset(&culture)).collect();
        let job = submit_staged_training(&culture, &stages, &trainer, &opts).await?;
        println!(
            "{culture}: jobs {:?} -> adapter {} (trained on {})",
            job.job_ids,
            job.backend_adapter_id.as_deref().unwrap_or("-"),
            &job.trained_on_digest()[..12]
        );
    }
    for s in trainer.submissions() {
        println!("  submitted {} stage, init from {:?}", s.culture, s.init_adapter_id);
    }
    Ok(())
}
