//! Job records, persisted one JSON file per job so a restart can report
//! interrupted work instead of losing it.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::ErrorBody;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Visualize,
    Edit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
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

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Progress {
    pub completed: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub id: String,
    pub project_id: String,
    pub kind: JobKind,
    pub state: JobState,
    pub progress: Progress,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

#[derive(Debug)]
pub struct JobStore {
    dir: PathBuf,
    jobs: Mutex<HashMap<String, JobStatus>>,
}

impl JobStore {
    /// Loads persisted jobs; any that were queued or running are marked
    /// failed.
    pub fn open(dir: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        let store = JobStore {
            dir: dir.to_path_buf(),
            jobs: Mutex::new(HashMap::new()),
        };
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().is_none_or(|e| e != "json") {
                continue;
            }
            let parsed = std::fs::read(&path)
                .ok()
                .and_then(|bytes| serde_json::from_slice::<JobStatus>(&bytes).ok());
            let Some(mut job) = parsed else {
                tracing::warn!(path = %path.display(), "skipping unreadable job record");
                continue;
            };
            if !job.state.is_terminal() {
                job.state = JobState::Failed;
                job.error = Some(ErrorBody {
                    code: "interrupted".into(),
                    message: "the service stopped before this job finished".into(),
                });
                job.updated_at = Utc::now();
                store.persist(&job);
            }
            store.jobs.lock().unwrap().insert(job.id.clone(), job);
        }
        Ok(store)
    }

    fn persist(&self, job: &JobStatus) {
        let path = self.dir.join(format!("{}.json", job.id));
        let tmp = path.with_extension("tmp");
        let written = std::fs::write(&tmp, serde_json::to_vec_pretty(job).expect("job serializes"))
            .and_then(|_| std::fs::rename(&tmp, &path));
        if let Err(e) = written {
            tracing::error!(job = %job.id, error = %e, "could not persist job");
        }
    }

    pub fn create(&self, project_id: &str, kind: JobKind) -> JobStatus {
        let now = Utc::now();
        let job = JobStatus {
            id: uuid::Uuid::new_v4().to_string(),
            project_id: project_id.to_string(),
            kind,
            state: JobState::Queued,
            progress: Progress::default(),
            result: None,
            error: None,
            created_at: now,
            updated_at: now,
        };
        self.persist(&job);
        self.jobs.lock().unwrap().insert(job.id.clone(), job.clone());
        job
    }

    pub fn get(&self, id: &str) -> Option<JobStatus> {
        self.jobs.lock().unwrap().get(id).cloned()
    }

    /// In-memory only; progress is not worth a disk write per step.
    pub fn progress(&self, id: &str, completed: usize, total: usize) {
        if let Some(job) = self.jobs.lock().unwrap().get_mut(id) {
            job.progress = Progress { completed, total };
            job.updated_at = Utc::now();
        }
    }

    /// Moves a job forward. Backward or repeated transitions are ignored.
    pub fn transition(
        &self,
        id: &str,
        state: JobState,
        result: Option<serde_json::Value>,
        error: Option<ErrorBody>,
    ) {
        let mut jobs = self.jobs.lock().unwrap();
        let Some(job) = jobs.get_mut(id) else { return };
        if job.state.is_terminal() || state <= job.state {
            tracing::warn!(job = id, from = ?job.state, to = ?state, "ignoring non-monotone job transition");
            return;
        }
        job.state = state;
        job.result = result.or(job.result.take());
        job.error = error;
        job.updated_at = Utc::now();
        let snapshot = job.clone();
        drop(jobs);
        self.persist(&snapshot);
    }
}
