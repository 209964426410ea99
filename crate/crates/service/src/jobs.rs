//! Training jobs: a registry of records whose state only moves forward, and
//! a worker that trains on the blocking pool behind a concurrency limit.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use stableflow::dataset::{parse_trajectories, Dataset};
use stableflow::trainer::{train_with, TrainConfig};
use stableflow::Execution;
use tokio::sync::Semaphore;

use crate::store::{new_id, ModelRecord, Store};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub epoch: usize,
    pub epochs: usize,
    pub loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub dataset_id: String,
    pub state: JobState,
    pub progress: Progress,
    /// Mean epoch losses so far.
    pub losses: Vec<f64>,
    pub model_id: Option<String>,
    pub error: Option<String>,
}

#[derive(Clone, Default)]
pub struct JobRegistry {
    jobs: Arc<Mutex<HashMap<String, JobRecord>>>,
}

impl JobRegistry {
    pub fn get(&self, id: &str) -> Option<JobRecord> {
        self.jobs.lock().expect("job registry poisoned").get(id).cloned()
    }

    fn insert(&self, record: JobRecord) {
        self.jobs
            .lock()
            .expect("job registry poisoned")
            .insert(record.id.clone(), record);
    }

    /// Applies `f` to a job. State changes that would move backwards, or
    /// away from a terminal state, are ignored.
    fn update(&self, id: &str, f: impl FnOnce(&mut JobRecord)) {
        let mut jobs = self.jobs.lock().expect("job registry poisoned");
        if let Some(job) = jobs.get_mut(id) {
            let before = job.state;
            let mut next = job.clone();
            f(&mut next);
            if before.is_terminal() || next.state < before {
                log::warn!("job {id}: ignoring transition {before:?} -> {:?}", next.state);
                return;
            }
            *job = next;
        }
    }
}

/// Registers a queued job and starts its worker.
pub fn submit(
    registry: &JobRegistry,
    store: &Store,
    limit: Arc<Semaphore>,
    dataset_id: String,
    dataset_blob: String,
    config: TrainConfig,
) -> JobRecord {
    let record = JobRecord {
        id: new_id(),
        dataset_id: dataset_id.clone(),
        state: JobState::Queued,
        progress: Progress {
            epoch: 0,
            epochs: config.epochs,
            loss: None,
        },
        losses: Vec::new(),
        model_id: None,
        error: None,
    };
    registry.insert(record.clone());
    let (registry, store, id) = (registry.clone(), store.clone(), record.id.clone());
    tokio::spawn(async move {
        let _permit = limit.acquire_owned().await.expect("semaphore never closed");
        registry.update(&id, |j| j.state = JobState::Running);
        let worker = {
            let (registry, id) = (registry.clone(), id.clone());
            tokio::task::spawn_blocking(move || run(&registry, &store, &id, &dataset_id, &dataset_blob, &config))
        };
        let outcome = match worker.await {
            Ok(r) => r,
            Err(e) => Err(format!("training worker panicked: {e}")),
        };
        registry.update(&id, |j| match outcome {
            Ok(model_id) => {
                j.state = JobState::Done;
                j.model_id = Some(model_id);
            }
            Err(msg) => {
                j.state = JobState::Failed;
                j.error = Some(msg);
            }
        });
    });
    record
}

fn run(
    registry: &JobRegistry,
    store: &Store,
    job_id: &str,
    dataset_id: &str,
    blob: &str,
    config: &TrainConfig,
) -> Result<String, String> {
    let text = store.get_blob(blob).map_err(|e| format!("dataset blob: {e}"))?;
    let dataset = Dataset::new(parse_trajectories(&text).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    // Training is single-threaded per job; parallelism comes from running
    // jobs side by side.
    let ckpt = train_with(&dataset, config, Execution::Sequential, |r| {
        registry.update(job_id, |j| {
            j.progress.epoch = r.epoch + 1;
            j.progress.loss = Some(r.loss);
            j.losses.push(r.loss);
        })
    })
    .map_err(|e| e.to_string())?;
    let blob = store.put_blob(ckpt.to_json().as_bytes()).map_err(|e| e.to_string())?;
    let model = ModelRecord {
        id: new_id(),
        blob,
        dataset_id: dataset_id.to_string(),
        job_id: job_id.to_string(),
    };
    store.put_model(&model).map_err(|e| e.to_string())?;
    Ok(model.id)
}
