//! Seed-averaged comparison of the base model and routed adapters on the
//! bundled test sets, printed as a table of `mean ± std` cells.
//!
//!     cargo run --example evaluate_seeds

use culture_manager::config::PipelineConfig;
use culture_manager::eval::{aggregate_runs, f1_score, format_cell};
use culture_manager::model::{Label, QueryMode};
use culture_manager::pipeline::{self, run_evaluation};
use culture_manager::training::MockTrainer;

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let preds = [Label::One, Label::One, Label::Zero, Label::Zero];
    let golds = [Label::One, Label::Zero, Label::One, Label::Zero];
    println!("F1 on a toy case: {}", f1_score(&preds, &golds, Label::One)?);
    let (mean, std) = aggregate_runs(&[0.4371, 0.4498, 0.4625])?;
    println!("three runs aggregate to {}\n", format_cell(mean, std));

    let mut cfg = PipelineConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/data/pipeline.toml"))?;
    cfg.paths.root = cfg.paths.root.join("evaluate_seeds");
    let templates = pipeline::templates(&cfg)?;
    let trainer = MockTrainer::new();
    let modes = [QueryMode::TaskSpecific, QueryMode::TaskAgnostic];
    let report = run_evaluation(&cfg, 3, &modes, &trainer, &templates).await?;
    println!("seeds {:?}", report.seeds);
    print!("{}", report.table.to_text());
    for ((task, method), n) in report.parse_failures.iter().filter(|(_, n)| **n > 0) {
        println!("{task}/{method}: {n} unparseable replies scored as negative");
    }
    Ok(())
}
