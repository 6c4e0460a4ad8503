mod common;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use culture_manager::backend::mock::ScriptedChat;
use culture_manager::backend::sim::{SimulatedChat, SimulatedSearch};
use culture_manager::backend::{InFlightProbe, Limited};
use culture_manager::model::{CultureId, QueryMode};
use culture_manager::pipeline::{self, run_pipeline, run_synthesis, Backends};
use culture_manager::prompts::Templates;
use culture_manager::store::{self, RunManifest};
use culture_manager::training::MockTrainer;

const BOTH: [QueryMode; 2] = [QueryMode::TaskSpecific, QueryMode::TaskAgnostic];

#[tokio::test]
async fn backend_calls_respect_in_flight_caps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::pipeline_config(dir.path());
    let chat_probe = Arc::new(InFlightProbe::default());
    let search_probe = Arc::new(InFlightProbe::default());
    let slow = ScriptedChat::new()
        .with_fallback(Arc::new(SimulatedChat::new(cfg.seed)))
        .with_delay(Duration::from_millis(3));
    let backends = Backends::new(
        Arc::new(Limited::new(slow, 3).with_probe(chat_probe.clone())),
        Arc::new(Limited::new(SimulatedSearch::new(2), 2).with_probe(search_probe.clone())),
    );
    let mut stages = Vec::new();
    let run = run_synthesis(&cfg, &common::pipeline_demos(), &BOTH, &backends, Templates::embedded(), &mut stages)
        .await
        .unwrap();
    assert_eq!(run.samples.len(), 96);
    assert!(chat_probe.peak() <= 3, "chat peak {}", chat_probe.peak());
    assert!(chat_probe.peak() >= 2, "calls never overlapped");
    assert!(search_probe.peak() <= 2, "search peak {}", search_probe.peak());
    // one query call per (culture, task, mode), then a summary and a synthesis per material
    assert!(chat_probe.total() >= 8 + 24 + 24, "{} calls", chat_probe.total());
}

fn dataset_bytes(cfg: &culture_manager::config::PipelineConfig) -> BTreeMap<String, Vec<u8>> {
    let layout = pipeline::layout(cfg);
    let mut out = BTreeMap::new();
    for c in cfg.culture_ids() {
        out.insert(c.to_string(), std::fs::read(layout.culture_dataset(&c)).unwrap());
        for t in &cfg.tasks {
            let p = layout.task_dataset(&c, &t.id);
            if p.exists() {
                out.insert(format!("{c}/{}", t.id), std::fs::read(p).unwrap());
            }
        }
    }
    out
}

#[tokio::test]
async fn same_seed_gives_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::pipeline_config(&dir.path().join("run"));
    common::attach_demo_files(&mut cfg, dir.path());

    let mut seen: Vec<(BTreeMap<String, Vec<u8>>, RunManifest)> = Vec::new();
    for _ in 0..2 {
        let backends = Backends::from_config(&cfg).unwrap();
        let out = run_pipeline(&cfg, &BOTH, &backends, Templates::embedded(), true).await;
        out.result.unwrap();
        let written: RunManifest = store::read_json(out.manifest_path.as_ref().unwrap()).unwrap();
        seen.push((dataset_bytes(&cfg), written.without_timestamps()));
    }
    assert_eq!(seen[0].0, seen[1].0);
    assert_eq!(seen[0].1, seen[1].1);
    assert_eq!(seen[0].1.dataset_digests.len(), 2 + 4);

    let mut other = cfg.clone();
    other.seed += 1;
    let backends = Backends::from_config(&other).unwrap();
    run_pipeline(&other, &BOTH, &backends, Templates::embedded(), true).await.result.unwrap();
    assert_ne!(dataset_bytes(&other), seen[0].0, "a different seed should change the corpus");
}

#[tokio::test]
async fn changed_datasets_are_not_overwritten_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::pipeline_config(&dir.path().join("run"));
    common::attach_demo_files(&mut cfg, dir.path());
    let backends = Backends::from_config(&cfg).unwrap();
    run_pipeline(&cfg, &BOTH, &backends, Templates::embedded(), false).await.result.unwrap();
    // identical content is a no-op
    run_pipeline(&cfg, &BOTH, &backends, Templates::embedded(), false).await.result.unwrap();

    cfg.seed += 1;
    let backends = Backends::from_config(&cfg).unwrap();
    let again = run_pipeline(&cfg, &BOTH, &backends, Templates::embedded(), false).await;
    assert!(matches!(
        again.result,
        Err(pipeline::PipelineError::Store(store::StoreError::Overwrite { .. }))
    ));
    let written: RunManifest = store::read_json(again.manifest_path.as_ref().unwrap()).unwrap();
    assert!(written.abort_cause.is_some());
}

#[tokio::test]
async fn synthesized_corpus_trains_one_adapter_per_culture() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::pipeline_config(&dir.path().join("run"));
    common::attach_demo_files(&mut cfg, dir.path());
    let backends = Backends::from_config(&cfg).unwrap();
    let out = run_pipeline(&cfg, &BOTH, &backends, Templates::embedded(), false).await;
    let digests = out.manifest.dataset_digests.clone();
    out.result.unwrap();

    let layout = pipeline::layout(&cfg);
    let datasets: Vec<(CultureId, _, String)> = cfg
        .culture_ids()
        .into_iter()
        .map(|c| {
            let d = digests[c.as_str()].clone();
            (c.clone(), layout.culture_dataset(&c), d)
        })
        .collect();
    let trainer = MockTrainer::new();
    let (registry, jobs) = pipeline::train_cultures(&datasets, &trainer, &pipeline::train_options(&cfg))
        .await
        .unwrap();
    assert_eq!(jobs.len(), 2);
    assert!(registry.missing(&cfg.culture_ids()).is_empty());
    for (c, _, d) in &datasets {
        assert_eq!(&registry.get(c).unwrap().trained_on_digest, d);
    }
}
