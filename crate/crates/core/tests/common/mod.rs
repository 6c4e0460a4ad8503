#![allow(dead_code)]

use std::path::PathBuf;

use chrono::{TimeZone, Utc};
use culture_manager::model::{
    AnswerFormat, CultureId, Demonstration, RetrievedMaterial, SampleContent, SourceRef, TaskSpec,
};
use culture_manager::prompts::Templates;

pub fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel)
}

pub fn culture(name: &str) -> CultureId {
    CultureId::new(name).unwrap()
}

fn demos(task: &str, texts: &[&str]) -> Vec<Demonstration> {
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| Demonstration::new(format!("{task}#{i}"), task, *t).unwrap())
        .collect()
}

/// (fixture name, rendered prompt) for every golden template.
pub fn golden_renderings() -> Vec<(&'static str, String)> {
    let t = Templates::embedded();
    let turkish = culture("Turkish");
    let arabic = culture("Arabic");
    let tr_demos = demos("tr-abuse", &["Sen tam bir salaksın", "Bu maç berbattı"]);
    let material = RetrievedMaterial {
        id: "arabic/ar-hate/specific/q1/m".into(),
        query_id: "arabic/ar-hate/specific/q1".into(),
        sources: vec![SourceRef {
            url: "https://example.org/forum".into(),
            fetched_at: Utc.with_ymd_and_hms(2025, 1, 1, 0, 0, 0).unwrap(),
        }],
        summary: "Arabic forums often mix dialect insults with religious references.".into(),
        k: 1,
        failures: vec![],
    };
    let hate = TaskSpec::new("ar-hate", "hate speech detection", AnswerFormat::Binary01).unwrap();
    let binary = TaskSpec::new("x", "hate speech", AnswerFormat::Binary01).unwrap();
    let tf = TaskSpec::new("tr-bench", "cultural knowledge", AnswerFormat::TrueFalse).unwrap();
    vec![
        (
            "query_task_specific",
            t.task_specific_query(3, &turkish, "abusive language detection", &tr_demos).unwrap().text,
        ),
        ("query_task_agnostic", t.task_agnostic_query(3, &turkish, "abusive language detection").unwrap().text),
        (
            "synthesis",
            t.synthesis(4, &hate, &material, &arabic, &demos("ar-hate", &["ya 7mar", "shukran ya akhi"]))
                .unwrap()
                .text,
        ),
        ("router", t.router(&[arabic.clone(), turkish.clone()], "Bu maç berbattı").unwrap().text),
        ("task_binary", t.task(&binary, &SampleContent::text("I love this city")).unwrap().text),
        (
            "task_true_false",
            t.task(&tf, &SampleContent::qa("What do people in Turkey usually drink with breakfast?", "Black tea"))
                .unwrap()
                .text,
        ),
        ("anthropological", t.anthropological("Turkish").unwrap().text),
    ]
}

pub fn golden_text(name: &str) -> String {
    std::fs::read_to_string(fixture(&format!("prompts/{name}.txt"))).unwrap()
}

/// Two cultures, one binary and one true/false task, budget n3 m4 b2 k2.
pub fn pipeline_config(root: &std::path::Path) -> culture_manager::config::PipelineConfig {
    use culture_manager::config::{Budget, PipelineConfig, TaskConfig};
    let mut cfg = PipelineConfig::minimal(
        &["Arabic", "Turkish"],
        vec![
            TaskConfig::new("hate", "hate speech detection", AnswerFormat::Binary01),
            TaskConfig::new("norms", "cultural norms", AnswerFormat::TrueFalse),
        ],
        "base-8b",
        Budget { n: 3, m: 4, b: 2, k: 2 },
    );
    cfg.seed = 11;
    cfg.paths.root = root.to_path_buf();
    cfg
}

/// Four demonstrations per task of [`pipeline_config`].
pub fn pipeline_demos() -> std::collections::BTreeMap<String, Vec<Demonstration>> {
    ["hate", "norms"]
        .iter()
        .map(|t| {
            let texts: Vec<String> = (0..4).map(|i| format!("{t} demo {i}")).collect();
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            (t.to_string(), demos(t, &refs))
        })
        .collect()
}

/// Writes the demonstrations of [`pipeline_demos`] as JSONL files and points
/// the config at them.
pub fn attach_demo_files(cfg: &mut culture_manager::config::PipelineConfig, dir: &std::path::Path) {
    let demos = pipeline_demos();
    for task in &mut cfg.tasks {
        let path = dir.join(format!("{}-demos.jsonl", task.id));
        let body: String = demos[&task.id]
            .iter()
            .map(|d| format!("{}\n", serde_json::json!({"id": d.id, "text": d.text})))
            .collect();
        std::fs::write(&path, body).unwrap();
        task.demonstrations = Some(path);
    }
}
