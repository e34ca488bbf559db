//! Persistent FIFO inference queue.
//!
//! Jobs are rows in the store's `jobs` table ordered by an autoincrement
//! `seq`. A claim atomically moves the oldest claimable job to
//! `in_progress`; a job is claimable while pending, or while in progress with
//! an expired lease. Failed attempts go back to pending with their original
//! `seq`, so a retried job is still the oldest incomplete one. Jobs are never
//! deleted.

use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use rusqlite::{params, Connection, OptionalExtension, Row, Transaction};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{FootSide, InferenceResult};
use crate::store::{self, from_millis, to_millis, Store, StoreError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Pending,
    InProgress,
    Complete,
    Failed,
}

impl JobState {
    pub fn as_str(self) -> &'static str {
        match self {
            JobState::Pending => "pending",
            JobState::InProgress => "in_progress",
            JobState::Complete => "complete",
            JobState::Failed => "failed",
        }
    }

    fn parse(s: &str) -> Option<JobState> {
        Some(match s {
            "pending" => JobState::Pending,
            "in_progress" => JobState::InProgress,
            "complete" => JobState::Complete,
            "failed" => JobState::Failed,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub job_id: String,
    pub seq: u64,
    pub exam_id: String,
    pub side: FootSide,
    pub photo_id: String,
    pub state: JobState,
    pub attempts: u32,
    pub worker_id: Option<String>,
    pub enqueued_at: DateTime<Utc>,
    pub claimed_at: Option<DateTime<Utc>>,
    pub finished_at: Option<DateTime<Utc>>,
    pub result: Option<InferenceResult>,
    pub failure_reason: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueStats {
    pub pending: u64,
    pub in_progress: u64,
    pub complete: u64,
    pub failed: u64,
}

impl QueueStats {
    pub fn total(&self) -> u64 {
        self.pending + self.in_progress + self.complete + self.failed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QueueConfig {
    /// How long a claim stays exclusive before the job can be claimed again.
    #[serde(with = "millis")]
    pub lease: Duration,
    /// Attempts allowed before a job whose lease expired is marked failed.
    pub max_attempts: u32,
}

impl Default for QueueConfig {
    fn default() -> Self {
        Self {
            lease: Duration::from_secs(60),
            max_attempts: 3,
        }
    }
}

mod millis {
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
pub enum QueueError {
    #[error("a job for exam {exam_id} {side} foot is already queued")]
    DuplicateJob { exam_id: String, side: FootSide },
    #[error("photo {0} does not exist")]
    UnknownPhoto(String),
    #[error("job {0} does not exist")]
    UnknownJob(String),
    #[error("job {job_id} is {state:?}, not in progress")]
    InvalidState { job_id: String, state: JobState },
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl From<rusqlite::Error> for QueueError {
    fn from(err: rusqlite::Error) -> Self {
        QueueError::Store(err.into())
    }
}

/// Handle on the queue stored in a [`Store`]. Cheap to clone.
#[derive(Debug, Clone)]
pub struct JobQueue {
    store: Arc<Store>,
    config: QueueConfig,
}

const JOB_COLUMNS: &str = "job_id, seq, exam_id, side, photo_id, state, attempts, worker_id, \
                           enqueued_at, claimed_at, finished_at, result, failure_reason";

impl JobQueue {
    pub fn new(store: Arc<Store>, config: QueueConfig) -> Self {
        Self { store, config }
    }

    pub fn config(&self) -> &QueueConfig {
        &self.config
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn enqueue(&self, exam_id: &str, side: FootSide, photo_id: &str) -> Result<Job, QueueError> {
        self.store.write(|tx| enqueue_tx(tx, exam_id, side, photo_id))
    }

    /// Claims the oldest claimable job for `worker_id`, or returns `None`
    /// when nothing is claimable.
    pub fn claim_next(&self, worker_id: &str) -> Result<Option<Job>, QueueError> {
        let now = Utc::now();
        let cutoff = to_millis(now) - self.config.lease.as_millis() as i64;
        self.store.write(|tx| {
            // Expired claims that used up their attempts are retired first.
            tx.execute(
                "UPDATE jobs SET state = 'failed', finished_at = ?1,
                        failure_reason = 'lease expired after final attempt'
                 WHERE state = 'in_progress' AND claimed_at <= ?2 AND attempts >= ?3",
                params![to_millis(now), cutoff, self.config.max_attempts],
            )?;
            let pending: Option<i64> = tx
                .query_row(
                    "SELECT seq FROM jobs WHERE state = 'pending' ORDER BY seq LIMIT 1",
                    [],
                    |r| r.get(0),
                )
                .optional()?;
            let expired: Option<i64> = tx
                .query_row(
                    "SELECT seq FROM jobs WHERE state = 'in_progress' AND claimed_at <= ?1
                     ORDER BY seq LIMIT 1",
                    [cutoff],
                    |r| r.get(0),
                )
                .optional()?;
            let Some(seq) = pending.into_iter().chain(expired).min() else {
                return Ok(None);
            };
            let job = tx.query_row(
                &format!(
                    "UPDATE jobs SET state = 'in_progress', attempts = attempts + 1,
                            worker_id = ?1, claimed_at = ?2
                     WHERE seq = ?3 RETURNING {JOB_COLUMNS}"
                ),
                params![worker_id, to_millis(now), seq],
                job_from_row,
            )?;
            Ok(Some(job))
        })
    }

    pub fn complete(&self, job_id: &str, result: &InferenceResult) -> Result<Job, QueueError> {
        let body = serde_json::to_string(result).map_err(StoreError::from)?;
        self.store.write(|tx| {
            let updated = tx
                .query_row(
                    &format!(
                        "UPDATE jobs SET state = 'complete', result = ?1, finished_at = ?2
                         WHERE job_id = ?3 AND state = 'in_progress' RETURNING {JOB_COLUMNS}"
                    ),
                    params![body, to_millis(Utc::now()), job_id],
                    job_from_row,
                )
                .optional()?;
            match updated {
                Some(job) => Ok(job),
                None => Err(not_in_progress(tx, job_id)),
            }
        })
    }

    /// Records a failed attempt. The job goes back to pending if it has
    /// attempts left, otherwise it is marked failed with `reason`.
    pub fn fail(&self, job_id: &str, reason: &str, max_attempts: u32) -> Result<Job, QueueError> {
        self.store.write(|tx| {
            let updated = tx
                .query_row(
                    &format!(
                        "UPDATE jobs SET
                            state = CASE WHEN attempts < ?1 THEN 'pending' ELSE 'failed' END,
                            finished_at = CASE WHEN attempts < ?1 THEN NULL ELSE ?2 END,
                            failure_reason = ?3
                         WHERE job_id = ?4 AND state = 'in_progress' RETURNING {JOB_COLUMNS}"
                    ),
                    params![max_attempts, to_millis(Utc::now()), reason, job_id],
                    job_from_row,
                )
                .optional()?;
            match updated {
                Some(job) => Ok(job),
                None => Err(not_in_progress(tx, job_id)),
            }
        })
    }

    /// Puts a failed job back in the queue at its original position.
    pub fn requeue(&self, job_id: &str) -> Result<Job, QueueError> {
        self.store.write(|tx| {
            let current = load_job(tx, job_id)?.ok_or_else(|| QueueError::UnknownJob(job_id.into()))?;
            if current.state != JobState::Failed {
                return Err(QueueError::InvalidState {
                    job_id: job_id.into(),
                    state: current.state,
                });
            }
            let result = tx.query_row(
                &format!(
                    "UPDATE jobs SET state = 'pending', finished_at = NULL
                     WHERE job_id = ?1 RETURNING {JOB_COLUMNS}"
                ),
                [job_id],
                job_from_row,
            );
            match result {
                Ok(job) => Ok(job),
                Err(e) if is_unique_violation(&e) => Err(QueueError::DuplicateJob {
                    exam_id: current.exam_id,
                    side: current.side,
                }),
                Err(e) => Err(e.into()),
            }
        })
    }

    pub fn get(&self, job_id: &str) -> Result<Job, QueueError> {
        self.store
            .read(|conn| Ok(load_job(conn, job_id)))??
            .ok_or_else(|| QueueError::UnknownJob(job_id.into()))
    }

    /// All jobs in `seq` order.
    pub fn jobs(&self) -> Result<Vec<Job>, QueueError> {
        let jobs = self.store.read(|conn| {
            let mut stmt = conn.prepare(&format!("SELECT {JOB_COLUMNS} FROM jobs ORDER BY seq"))?;
            let rows = stmt.query_map([], job_from_row)?;
            Ok(rows.collect::<rusqlite::Result<Vec<_>>>()?)
        })?;
        Ok(jobs)
    }

    pub fn stats(&self) -> Result<QueueStats, QueueError> {
        let stats = self.store.read(|conn| {
            let mut stats = QueueStats::default();
            let mut stmt = conn.prepare("SELECT state, COUNT(*) FROM jobs GROUP BY state")?;
            let mut rows = stmt.query([])?;
            while let Some(row) = rows.next()? {
                let state: String = row.get(0)?;
                let n = row.get::<_, i64>(1)? as u64;
                match JobState::parse(&state) {
                    Some(JobState::Pending) => stats.pending = n,
                    Some(JobState::InProgress) => stats.in_progress = n,
                    Some(JobState::Complete) => stats.complete = n,
                    Some(JobState::Failed) => stats.failed = n,
                    None => return Err(StoreError::StorageFailure(format!("unknown job state {state}"))),
                }
            }
            Ok(stats)
        })?;
        Ok(stats)
    }
}

pub(crate) fn enqueue_tx(
    tx: &Transaction<'_>,
    exam_id: &str,
    side: FootSide,
    photo_id: &str,
) -> Result<Job, QueueError> {
    if !store::photo_exists(tx, photo_id)? {
        return Err(QueueError::UnknownPhoto(photo_id.into()));
    }
    let result = tx.query_row(
        &format!(
            "INSERT INTO jobs (job_id, exam_id, side, photo_id, state, attempts, enqueued_at)
             VALUES (?1, ?2, ?3, ?4, 'pending', 0, ?5) RETURNING {JOB_COLUMNS}"
        ),
        params![store::new_id(), exam_id, side.as_str(), photo_id, to_millis(Utc::now())],
        job_from_row,
    );
    match result {
        Ok(job) => Ok(job),
        Err(e) if is_unique_violation(&e) => Err(QueueError::DuplicateJob {
            exam_id: exam_id.into(),
            side,
        }),
        Err(e) => Err(e.into()),
    }
}

fn is_unique_violation(err: &rusqlite::Error) -> bool {
    matches!(
        err,
        rusqlite::Error::SqliteFailure(e, _) if e.code == rusqlite::ErrorCode::ConstraintViolation
    )
}

fn not_in_progress(conn: &Connection, job_id: &str) -> QueueError {
    match load_job(conn, job_id) {
        Ok(Some(job)) => QueueError::InvalidState {
            job_id: job_id.into(),
            state: job.state,
        },
        Ok(None) => QueueError::UnknownJob(job_id.into()),
        Err(e) => e,
    }
}

fn load_job(conn: &Connection, job_id: &str) -> Result<Option<Job>, QueueError> {
    Ok(conn
        .query_row(
            &format!("SELECT {JOB_COLUMNS} FROM jobs WHERE job_id = ?1"),
            [job_id],
            job_from_row,
        )
        .optional()?)
}

fn job_from_row(row: &Row<'_>) -> rusqlite::Result<Job> {
    let conversion = |idx: usize, msg: String| {
        rusqlite::Error::FromSqlConversionFailure(
            idx,
            rusqlite::types::Type::Text,
            Box::<dyn std::error::Error + Send + Sync>::from(msg),
        )
    };
    let state: String = row.get(5)?;
    let result: Option<String> = row.get(11)?;
    Ok(Job {
        job_id: row.get(0)?,
        seq: row.get::<_, i64>(1)? as u64,
        exam_id: row.get(2)?,
        side: store::side_from_sql(&row.get::<_, String>(3)?)?,
        photo_id: row.get(4)?,
        state: JobState::parse(&state).ok_or_else(|| conversion(5, format!("bad state {state}")))?,
        attempts: row.get(6)?,
        worker_id: row.get(7)?,
        enqueued_at: from_millis(row.get(8)?),
        claimed_at: row.get::<_, Option<i64>>(9)?.map(from_millis),
        finished_at: row.get::<_, Option<i64>>(10)?.map(from_millis),
        result: result
            .map(|s| serde_json::from_str(&s).map_err(|e| conversion(11, e.to_string())))
            .transpose()?,
        failure_reason: row.get(12)?,
    })
}
