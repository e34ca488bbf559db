//! Polling inference worker.
//!
//! A worker claims the oldest incomplete job, fetches and decodes its photo,
//! runs the detector, writes the result onto the exam and marks the job
//! complete. The result is written before the job is completed so a crash in
//! between leads to a retry that rewrites the same result instead of losing
//! it. Any number of workers can share one store.

use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use chrono::Utc;
use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::Detector;
use crate::domain::InferenceResult;
use crate::imaging::decode_png;
use crate::queue::{Job, JobQueue, JobState, QueueError};
use crate::service::{ExamService, ServiceError};
use crate::store::StoreError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkerConfig {
    #[serde(rename = "poll_interval_ms", with = "duration_ms")]
    pub poll_interval: Duration,
    pub max_attempts: u32,
}

impl Default for WorkerConfig {
    fn default() -> Self {
        Self {
            poll_interval: Duration::from_millis(500),
            max_attempts: 3,
        }
    }
}

mod duration_ms {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

#[derive(Debug, Error)]
pub enum WorkerError {
    /// The store could not be reached. Any claimed job is left in progress
    /// and becomes claimable again when its lease expires.
    #[error("storage failure: {0}")]
    StorageFailure(String),
}

impl From<QueueError> for WorkerError {
    fn from(err: QueueError) -> Self {
        WorkerError::StorageFailure(err.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOutcome {
    pub processed: bool,
    pub job_id: Option<String>,
}

impl RunOutcome {
    fn idle() -> Self {
        Self {
            processed: false,
            job_id: None,
        }
    }

    fn handled(job: &Job) -> Self {
        Self {
            processed: true,
            job_id: Some(job.job_id.clone()),
        }
    }
}

/// Wakes sleeping workers as soon as shutdown is requested.
#[derive(Debug, Default)]
pub struct ShutdownSignal {
    stopped: Mutex<bool>,
    cond: Condvar,
}

impl ShutdownSignal {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn trigger(&self) {
        *self.stopped.lock() = true;
        self.cond.notify_all();
    }

    pub fn is_triggered(&self) -> bool {
        *self.stopped.lock()
    }

    /// Sleeps up to `timeout`; returns true if shutdown was requested.
    pub fn wait(&self, timeout: Duration) -> bool {
        let mut stopped = self.stopped.lock();
        if !*stopped {
            self.cond.wait_for(&mut stopped, timeout);
        }
        *stopped
    }
}

pub struct Worker {
    id: String,
    service: ExamService,
    detector: Arc<dyn Detector>,
    config: WorkerConfig,
}

enum Failure {
    /// Give up on this attempt and let the queue decide whether to retry.
    Job(String),
    Storage(String),
}

impl From<ServiceError> for Failure {
    fn from(err: ServiceError) -> Self {
        match err {
            ServiceError::Storage(msg) => Failure::Storage(msg),
            other => Failure::Job(other.code().to_string()),
        }
    }
}

impl Worker {
    pub fn new(id: impl Into<String>, queue: JobQueue, detector: Arc<dyn Detector>, config: WorkerConfig) -> Self {
        Self {
            id: id.into(),
            service: ExamService::new(queue),
            detector,
            config,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    fn queue(&self) -> &JobQueue {
        self.service.queue()
    }

    /// Processes at most one job.
    pub fn run_once(&self) -> Result<RunOutcome, WorkerError> {
        let Some(job) = self.queue().claim_next(&self.id)? else {
            return Ok(RunOutcome::idle());
        };
        log::info!("claimed {}", job.job_id);
        match self.process(&job) {
            Ok(result) => {
                match self.queue().complete(&job.job_id, &result) {
                    Ok(_) => {}
                    // Another worker finished it after our lease expired.
                    Err(QueueError::InvalidState { state, .. }) => {
                        log::warn!("job {} already {} before completion", job.job_id, state.as_str());
                    }
                    Err(e) => return Err(e.into()),
                }
                log::info!("completed {} detections={}", job.job_id, result.detections.len());
                Ok(RunOutcome::handled(&job))
            }
            Err(Failure::Job(reason)) => {
                match self.queue().fail(&job.job_id, &reason, self.config.max_attempts) {
                    Ok(after) if after.state == JobState::Pending => {
                        log::info!(
                            "failed {} reason={} attempt={} requeued",
                            job.job_id,
                            reason,
                            after.attempts
                        );
                    }
                    Ok(_) => log::info!("failed {} reason={}", job.job_id, reason),
                    Err(QueueError::InvalidState { .. }) => {}
                    Err(e) => return Err(e.into()),
                }
                Ok(RunOutcome::handled(&job))
            }
            Err(Failure::Storage(msg)) => Err(WorkerError::StorageFailure(msg)),
        }
    }

    fn process(&self, job: &Job) -> Result<InferenceResult, Failure> {
        let (exam, _) = self.service.exam(&job.exam_id)?;
        let photo = exam
            .foot(job.side)
            .and_then(|f| f.photo.as_ref())
            .filter(|p| p.photo_id == job.photo_id)
            .ok_or_else(|| Failure::Job("photo not attached".into()))?;
        let bytes = match self.service.store().fetch_photo(&photo.blob) {
            Ok(bytes) => bytes,
            Err(StoreError::NotFound(_)) => return Err(Failure::Job("missing photo".into())),
            Err(e) => return Err(Failure::Storage(e.to_string())),
        };
        let image = decode_png(&bytes).map_err(|_| Failure::Job("decode".into()))?;
        let detections = self
            .detector
            .detect(&image)
            .map_err(|e| Failure::Job(format!("detect: {e}")))?;
        let result = InferenceResult::new(job.job_id.clone(), detections, Utc::now(), self.detector.id());
        self.service.record_result(&job.exam_id, job.side, &result)?;
        Ok(result)
    }

    /// Repeats [`Worker::run_once`] until `shutdown` fires, sleeping for the
    /// poll interval whenever the queue is empty or the store is down.
    pub fn run_loop(&self, shutdown: &ShutdownSignal) {
        while !shutdown.is_triggered() {
            match self.run_once() {
                Ok(outcome) if outcome.processed => continue,
                Ok(_) => {}
                Err(e) => log::warn!("worker {}: {e}", self.id),
            }
            if shutdown.wait(self.config.poll_interval) {
                break;
            }
        }
    }
}

/// A set of worker threads sharing one shutdown signal.
pub struct WorkerPool {
    shutdown: Arc<ShutdownSignal>,
    handles: Vec<JoinHandle<()>>,
}

impl WorkerPool {
    /// Starts `count` workers named `<prefix>-<n>`.
    pub fn spawn(
        count: usize,
        prefix: &str,
        queue: JobQueue,
        detector: Arc<dyn Detector>,
        config: WorkerConfig,
    ) -> WorkerPool {
        let shutdown = ShutdownSignal::new();
        let handles = (0..count)
            .map(|n| {
                let worker = Worker::new(format!("{prefix}-{n}"), queue.clone(), detector.clone(), config.clone());
                let signal = shutdown.clone();
                thread::Builder::new()
                    .name(worker.id().to_string())
                    .spawn(move || worker.run_loop(&signal))
                    .expect("spawn worker thread")
            })
            .collect();
        WorkerPool { shutdown, handles }
    }

    pub fn shutdown_signal(&self) -> Arc<ShutdownSignal> {
        self.shutdown.clone()
    }

    pub fn shutdown(self) {
        self.shutdown.trigger();
        for handle in self.handles {
            let _ = handle.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Instant;

    #[test]
    fn shutdown_wakes_waiters() {
        let signal = ShutdownSignal::new();
        let s2 = signal.clone();
        let started = Instant::now();
        let t = thread::spawn(move || s2.wait(Duration::from_secs(10)));
        thread::sleep(Duration::from_millis(20));
        signal.trigger();
        assert!(t.join().unwrap());
        assert!(started.elapsed() < Duration::from_secs(2));
        assert!(signal.wait(Duration::from_secs(10)));
    }
}
