//! Adapter training as external jobs behind a trainer contract.
//!
//! The orchestrator never touches weights. It submits a dataset (inline
//! records) to a trainer service, polls the job, and records the resulting
//! adapter id in an [`AdapterRegistry`].
//!
//! Wire contract:
//!
//! ```text
//! POST {base}/jobs       JobRequest            -> {"job_id": "..."}
//! GET  {base}/jobs/{id}                        -> JobState
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use futures::future::join_all;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dedup::sha1_hex;
use crate::model::{AdapterRef, AdapterStatus, CultureId};
use crate::store::{self, StoreError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{path}: digest {actual} does not match expected {expected}")]
    DigestMismatch {
        path: PathBuf,
        expected: String,
        actual: String,
    },
    #[error("trainer rejected the job ({status}): {body}")]
    Rejected { status: u16, body: String },
    #[error("job {job_id} failed: {diagnostics}")]
    JobFailed { job_id: String, diagnostics: String },
    #[error("stage {stage} of {culture} failed: {source}")]
    StageFailed {
        culture: String,
        stage: usize,
        #[source]
        source: Box<TrainError>,
    },
    #[error("staged training needs at least 2 stages, got {0}; use submit_training for one")]
    TooFewStages(usize),
    #[error("unknown job {0}")]
    UnknownJob(String),
    #[error("job {job_id} did not finish within {waited:?}")]
    Timeout { job_id: String, waited: Duration },
    #[error("illegal job transition {from:?} -> {to:?}")]
    Transition { from: AdapterStatus, to: AdapterStatus },
    #[error("trainer transport: {0}")]
    Transport(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Body of `POST /jobs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRequest {
    pub culture: String,
    pub base_model_id: String,
    pub dataset_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub records: Option<Vec<serde_json::Value>>,
    pub hyperparams: BTreeMap<String, serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_adapter_id: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemoteStatus {
    Pending,
    Training,
    Ready,
    Failed,
}

/// Body of `GET /jobs/{id}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobState {
    pub status: RemoteStatus,
    #[serde(default)]
    pub adapter_id: Option<String>,
    #[serde(default)]
    pub diagnostics: Option<serde_json::Value>,
}

#[async_trait]
pub trait Trainer: Send + Sync {
    async fn submit(&self, request: &JobRequest) -> Result<String, TrainError>;
    async fn status(&self, job_id: &str) -> Result<JobState, TrainError>;
    fn describe(&self) -> String;
}

#[async_trait]
impl<T: Trainer + ?Sized> Trainer for std::sync::Arc<T> {
    async fn submit(&self, request: &JobRequest) -> Result<String, TrainError> {
        (**self).submit(request).await
    }
    async fn status(&self, job_id: &str) -> Result<JobState, TrainError> {
        (**self).status(job_id).await
    }
    fn describe(&self) -> String {
        (**self).describe()
    }
}

pub struct HttpTrainer {
    base: String,
    api_key: Option<String>,
    client: reqwest::Client,
}

impl HttpTrainer {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            base: base_url.into().trim_end_matches('/').to_string(),
            api_key,
            client: reqwest::Client::new(),
        }
    }

    fn auth(&self, rb: reqwest::RequestBuilder) -> reqwest::RequestBuilder {
        match &self.api_key {
            Some(k) => rb.bearer_auth(k),
            None => rb,
        }
    }
}

#[derive(Deserialize)]
struct Submitted {
    job_id: String,
}

#[async_trait]
impl Trainer for HttpTrainer {
    async fn submit(&self, request: &JobRequest) -> Result<String, TrainError> {
        let resp = self
            .auth(self.client.post(format!("{}/jobs", self.base)))
            .json(request)
            .send()
            .await
            .map_err(|e| TrainError::Transport(e.to_string()))?;
        let status = resp.status();
        let body = resp.text().await.map_err(|e| TrainError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(TrainError::Rejected {
                status: status.as_u16(),
                body,
            });
        }
        let s: Submitted = serde_json::from_str(&body).map_err(|e| TrainError::Transport(format!("bad job reply: {e}")))?;
        Ok(s.job_id)
    }

    async fn status(&self, job_id: &str) -> Result<JobState, TrainError> {
        let resp = self
            .auth(self.client.get(format!("{}/jobs/{job_id}", self.base)))
            .send()
            .await
            .map_err(|e| TrainError::Transport(e.to_string()))?;
        if resp.status() == reqwest::StatusCode::NOT_FOUND {
            return Err(TrainError::UnknownJob(job_id.to_string()));
        }
        if !resp.status().is_success() {
            return Err(TrainError::Transport(format!("status poll returned {}", resp.status())));
        }
        resp.json().await.map_err(|e| TrainError::Transport(e.to_string()))
    }

    fn describe(&self) -> String {
        format!("http-trainer({})", self.base)
    }
}

#[derive(Debug)]
struct MockJob {
    request: JobRequest,
    polls: u32,
}

/// In-process trainer. Adapter ids are a prefix of the SHA-1 over the
/// dataset digest and the init adapter, so they are stable across runs.
#[derive(Debug, Default)]
pub struct MockTrainer {
    jobs: Mutex<BTreeMap<String, MockJob>>,
    log: Mutex<Vec<JobRequest>>,
    polls_until_ready: u32,
    fail_digests: Vec<String>,
    reject_empty: bool,
}

impl MockTrainer {
    pub fn new() -> Self {
        Self {
            reject_empty: true,
            ..Self::default()
        }
    }

    /// Report `pending` then `training` for this many polls before `ready`.
    pub fn with_polls(mut self, polls: u32) -> Self {
        self.polls_until_ready = polls;
        self
    }

    /// Jobs on this dataset digest end in `failed`.
    pub fn failing_on(mut self, digest: impl Into<String>) -> Self {
        self.fail_digests.push(digest.into());
        self
    }

    /// Submitted requests in order.
    pub fn submissions(&self) -> Vec<JobRequest> {
        self.log.lock().expect("log").clone()
    }

    pub fn adapter_id_for(dataset_digest: &str, init: Option<&str>) -> String {
        let key = format!("{dataset_digest}:{}", init.unwrap_or(""));
        format!("adapter-{}", &sha1_hex(key.as_bytes())[..12])
    }
}

#[async_trait]
impl Trainer for MockTrainer {
    async fn submit(&self, request: &JobRequest) -> Result<String, TrainError> {
        if self.reject_empty && request.records.as_ref().is_some_and(Vec::is_empty) {
            return Err(TrainError::Rejected {
                status: 422,
                body: "dataset has no records".into(),
            });
        }
        self.log.lock().expect("log").push(request.clone());
        let mut jobs = self.jobs.lock().expect("jobs");
        let id = format!("job-{:04}", jobs.len() + 1);
        jobs.insert(
            id.clone(),
            MockJob {
                request: request.clone(),
                polls: 0,
            },
        );
        Ok(id)
    }

    async fn status(&self, job_id: &str) -> Result<JobState, TrainError> {
        let mut jobs = self.jobs.lock().expect("jobs");
        let job = jobs.get_mut(job_id).ok_or_else(|| TrainError::UnknownJob(job_id.to_string()))?;
        job.polls += 1;
        if job.polls <= self.polls_until_ready {
            let status = if job.polls == 1 { RemoteStatus::Pending } else { RemoteStatus::Training };
            return Ok(JobState {
                status,
                adapter_id: None,
                diagnostics: None,
            });
        }
        if self.fail_digests.contains(&job.request.dataset_digest) {
            return Ok(JobState {
                status: RemoteStatus::Failed,
                adapter_id: None,
                diagnostics: Some(serde_json::json!({"error": "loss diverged"})),
            });
        }
        Ok(JobState {
            status: RemoteStatus::Ready,
            adapter_id: Some(Self::adapter_id_for(
                &job.request.dataset_digest,
                job.request.init_adapter_id.as_deref(),
            )),
            diagnostics: None,
        })
    }

    fn describe(&self) -> String {
        "mock-trainer".into()
    }
}

/// One dataset in a training chain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRef {
    pub path: PathBuf,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingJob {
    pub culture: CultureId,
    pub stage_chain: Vec<StageRef>,
    pub hyperparams: BTreeMap<String, serde_json::Value>,
    pub status: AdapterStatus,
    /// Trainer job id per submitted stage.
    pub job_ids: Vec<String>,
    pub backend_adapter_id: Option<String>,
    pub diagnostics: Option<String>,
}

impl TrainingJob {
    pub fn new(culture: CultureId, stage_chain: Vec<StageRef>, hyperparams: BTreeMap<String, serde_json::Value>) -> Self {
        Self {
            culture,
            stage_chain,
            hyperparams,
            status: AdapterStatus::Pending,
            job_ids: Vec::new(),
            backend_adapter_id: None,
            diagnostics: None,
        }
    }

    /// pending -> training -> ready | failed; repeating the current state is a no-op.
    pub fn advance(&mut self, to: AdapterStatus) -> Result<(), TrainError> {
        use AdapterStatus::*;
        let ok = self.status == to || matches!((self.status, to), (Pending, Training) | (Training, Ready) | (Training, Failed));
        if !ok {
            return Err(TrainError::Transition { from: self.status, to });
        }
        self.status = to;
        Ok(())
    }

    pub fn trained_on_digest(&self) -> &str {
        &self.stage_chain.last().expect("non-empty chain").digest
    }

    pub fn adapter_ref(&self) -> Option<AdapterRef> {
        let id = self.backend_adapter_id.as_ref()?;
        (self.status == AdapterStatus::Ready)
            .then(|| AdapterRef::ready(self.culture.clone(), id.clone(), self.trained_on_digest()).ok())
            .flatten()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub base_model_id: String,
    pub hyperparams: BTreeMap<String, serde_json::Value>,
    pub poll_interval: Duration,
    pub timeout: Duration,
}

impl TrainOptions {
    pub fn new(base_model_id: impl Into<String>) -> Self {
        Self {
            base_model_id: base_model_id.into(),
            hyperparams: crate::config::default_hyperparams(),
            poll_interval: Duration::from_millis(10),
            timeout: Duration::from_secs(60),
        }
    }
}

fn dataset_records(path: &Path) -> Result<Vec<serde_json::Value>, TrainError> {
    Ok(store::read_jsonl(path)?)
}

async fn wait_for(
    trainer: &dyn Trainer,
    job_id: &str,
    job: &mut TrainingJob,
    opts: &TrainOptions,
) -> Result<String, TrainError> {
    let started = Instant::now();
    loop {
        let state = trainer.status(job_id).await?;
        match state.status {
            RemoteStatus::Pending => {}
            RemoteStatus::Training => job.advance(AdapterStatus::Training)?,
            RemoteStatus::Ready => {
                job.advance(AdapterStatus::Training)?;
                if let Some(id) = state.adapter_id.filter(|s| !s.trim().is_empty()) {
                    return Ok(id);
                }
                return Err(TrainError::JobFailed {
                    job_id: job_id.to_string(),
                    diagnostics: "ready without an adapter id".into(),
                });
            }
            RemoteStatus::Failed => {
                let diagnostics = state.diagnostics.map_or_else(|| "no diagnostics".into(), |d| d.to_string());
                return Err(TrainError::JobFailed {
                    job_id: job_id.to_string(),
                    diagnostics,
                });
            }
        }
        if started.elapsed() >= opts.timeout {
            return Err(TrainError::Timeout {
                job_id: job_id.to_string(),
                waited: started.elapsed(),
            });
        }
        tokio::time::sleep(opts.poll_interval).await;
    }
}

async fn run_chain(
    job: &mut TrainingJob,
    trainer: &dyn Trainer,
    opts: &TrainOptions,
    resume: Option<&str>,
) -> Result<(), TrainError> {
    let staged = job.stage_chain.len() > 1;
    let mut init: Option<String> = None;
    for (i, stage) in job.stage_chain.clone().iter().enumerate() {
        let result = async {
            let job_id = match resume {
                Some(id) if i + 1 == job.stage_chain.len() => id.to_string(),
                _ => {
                    let request = JobRequest {
                        culture: job.culture.to_string(),
                        base_model_id: opts.base_model_id.clone(),
                        dataset_digest: stage.digest.clone(),
                        dataset_url: None,
                        records: Some(dataset_records(&stage.path)?),
                        hyperparams: job.hyperparams.clone(),
                        init_adapter_id: init.clone(),
                    };
                    trainer.submit(&request).await?
                }
            };
            job.job_ids.push(job_id.clone());
            wait_for(trainer, &job_id, job, opts).await
        }
        .await;
        match result {
            Ok(adapter) => init = Some(adapter),
            Err(e) => {
                job.diagnostics = Some(e.to_string());
                if job.status == AdapterStatus::Pending {
                    job.advance(AdapterStatus::Training)?;
                }
                job.advance(AdapterStatus::Failed)?;
                return Err(if staged {
                    TrainError::StageFailed {
                        culture: job.culture.to_string(),
                        stage: i,
                        source: Box::new(e),
                    }
                } else {
                    e
                });
            }
        }
    }
    job.backend_adapter_id = init;
    job.advance(AdapterStatus::Ready)
}

/// Verifies the dataset file against `expected_digest`, submits it and waits
/// for the adapter.
pub async fn submit_training(
    culture: &CultureId,
    dataset_path: &Path,
    expected_digest: &str,
    trainer: &dyn Trainer,
    opts: &TrainOptions,
) -> Result<TrainingJob, TrainError> {
    let actual = store::file_digest(dataset_path)?;
    if actual != expected_digest {
        return Err(TrainError::DigestMismatch {
            path: dataset_path.to_path_buf(),
            expected: expected_digest.to_string(),
            actual,
        });
    }
    let mut job = TrainingJob::new(
        culture.clone(),
        vec![StageRef {
            path: dataset_path.to_path_buf(),
            digest: actual,
        }],
        opts.hyperparams.clone(),
    );
    run_chain(&mut job, trainer, opts, None).await?;
    Ok(job)
}

/// Sequential fine-tuning: stage i+1 starts from stage i's adapter.
pub async fn submit_staged_training(
    culture: &CultureId,
    stage_paths: &[PathBuf],
    trainer: &dyn Trainer,
    opts: &TrainOptions,
) -> Result<TrainingJob, TrainError> {
    if stage_paths.len() < 2 {
        return Err(TrainError::TooFewStages(stage_paths.len()));
    }
    let chain = stage_paths
        .iter()
        .map(|p| {
            Ok(StageRef {
                path: p.clone(),
                digest: store::file_digest(p)?,
            })
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    let mut job = TrainingJob::new(culture.clone(), chain, opts.hyperparams.clone());
    run_chain(&mut job, trainer, opts, None).await?;
    Ok(job)
}

/// Picks up a job submitted by an earlier process. `job` is the persisted
/// record; its last stage is polled under `job_id` instead of resubmitted.
pub async fn resume_training(
    mut job: TrainingJob,
    job_id: &str,
    trainer: &dyn Trainer,
    opts: &TrainOptions,
) -> Result<TrainingJob, TrainError> {
    job.job_ids.clear();
    job.status = AdapterStatus::Pending;
    if job.stage_chain.len() > 1 {
        // earlier stages are done; only the final one is outstanding
        job.stage_chain = vec![job.stage_chain.last().expect("non-empty").clone()];
    }
    run_chain(&mut job, trainer, opts, Some(job_id)).await?;
    Ok(job)
}

/// Trains every (culture, dataset) pair concurrently. Results come back in
/// input order.
pub async fn train_all(
    datasets: &[(CultureId, PathBuf, String)],
    trainer: &dyn Trainer,
    opts: &TrainOptions,
) -> Vec<Result<TrainingJob, TrainError>> {
    join_all(
        datasets
            .iter()
            .map(|(c, path, digest)| submit_training(c, path, digest, trainer, opts)),
    )
    .await
}

/// Last submission per culture, as written by [`JournaledTrainer`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub job_id: String,
    pub dataset_digest: String,
    #[serde(default)]
    pub init_adapter_id: Option<String>,
}

pub fn read_journal(path: &Path) -> Result<BTreeMap<String, JournalEntry>, StoreError> {
    if !path.exists() {
        return Ok(BTreeMap::new());
    }
    store::read_json(path)
}

/// Writes each accepted submission to a JSON file before polling starts, so
/// a restarted process can call [`resume_training`] with the job id.
pub struct JournaledTrainer<T> {
    inner: T,
    path: PathBuf,
    entries: Mutex<BTreeMap<String, JournalEntry>>,
}

impl<T: Trainer> JournaledTrainer<T> {
    pub fn new(inner: T, path: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let path = path.into();
        let entries = Mutex::new(read_journal(&path)?);
        Ok(Self { inner, path, entries })
    }

    pub fn entries(&self) -> BTreeMap<String, JournalEntry> {
        self.entries.lock().expect("journal lock").clone()
    }
}

#[async_trait]
impl<T: Trainer> Trainer for JournaledTrainer<T> {
    async fn submit(&self, request: &JobRequest) -> Result<String, TrainError> {
        let job_id = self.inner.submit(request).await?;
        let snapshot = {
            let mut entries = self.entries.lock().expect("journal lock");
            entries.insert(
                request.culture.clone(),
                JournalEntry {
                    job_id: job_id.clone(),
                    dataset_digest: request.dataset_digest.clone(),
                    init_adapter_id: request.init_adapter_id.clone(),
                },
            );
            entries.clone()
        };
        store::write_json(&self.path, &snapshot)?;
        Ok(job_id)
    }

    async fn status(&self, job_id: &str) -> Result<JobState, TrainError> {
        self.inner.status(job_id).await
    }

    fn describe(&self) -> String {
        self.inner.describe()
    }
}

/// Ready adapters keyed by culture name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdapterRegistry {
    pub adapters: BTreeMap<String, AdapterRef>,
}

impl AdapterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces the adapter for its culture. Only ready refs are kept.
    pub fn insert(&mut self, adapter: AdapterRef) -> Option<AdapterRef> {
        if !adapter.is_ready() {
            return None;
        }
        self.adapters.insert(adapter.culture.to_string(), adapter)
    }

    pub fn get(&self, culture: &CultureId) -> Option<&AdapterRef> {
        self.adapters.get(culture.as_str()).filter(|a| a.is_ready())
    }

    pub fn missing<'a>(&self, cultures: &'a [CultureId]) -> Vec<&'a CultureId> {
        cultures.iter().filter(|c| self.get(c).is_none()).collect()
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        store::read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        store::write_json(path, self)
    }
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn status() -> impl Strategy<Value = AdapterStatus> {
        prop::sample::select(vec![
            AdapterStatus::Pending,
            AdapterStatus::Training,
            AdapterStatus::Ready,
            AdapterStatus::Failed,
        ])
    }

    proptest! {
        #[test]
        fn only_forward_transitions_succeed(steps in prop::collection::vec(status(), 0..10)) {
            use AdapterStatus::*;
            let c = CultureId::new("Arabic").unwrap();
            let stage = StageRef { path: "d.jsonl".into(), digest: "abc".into() };
            let mut job = TrainingJob::new(c, vec![stage], BTreeMap::new());
            for to in steps {
                let from = job.status;
                let allowed = from == to || matches!((from, to), (Pending, Training) | (Training, Ready) | (Training, Failed));
                prop_assert_eq!(job.advance(to).is_ok(), allowed);
                prop_assert_eq!(job.status, if allowed { to } else { from });
                prop_assert_eq!(job.trained_on_digest(), "abc");
            }
            if job.backend_adapter_id.is_none() {
                prop_assert!(job.adapter_ref().is_none());
            }
        }
    }
}
