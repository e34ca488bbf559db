//! JSON bodies exchanged over the REST API, shared by server and client.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::detector::Detection;
use crate::domain::InferenceResult;
use crate::queue::{Job, JobState, QueueStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HealthStatus {
    Ok,
    Degraded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusReport {
    pub status: HealthStatus,
    pub store_ok: bool,
    pub queue: QueueStats,
    pub server_version: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VersionCheck {
    pub compatible: bool,
    pub min_supported: String,
    pub current: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreateExamRequest {
    pub patient_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreateExamResponse {
    pub exam_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FootDetailsRequest {
    pub checked: bool,
    /// Signed so that a negative count reaches the domain check rather than
    /// failing to parse.
    pub visible_ulcer_count: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhotoUploadRequest {
    pub png_base64: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhotoUploadResponse {
    pub photo_id: String,
    pub job_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfirmationRequest {
    pub agrees: bool,
}

/// Job status as polled by clients. Detections appear once complete and the
/// failure reason once failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobView {
    pub job_id: String,
    pub state: JobState,
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detections: Option<Vec<Detection>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detector_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completed_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_reason: Option<String>,
}

impl From<&Job> for JobView {
    fn from(job: &Job) -> Self {
        let result = job.result.as_ref().filter(|_| job.state == JobState::Complete);
        JobView {
            job_id: job.job_id.clone(),
            state: job.state,
            attempts: job.attempts,
            detections: result.map(|r| r.detections.clone()),
            detector_id: result.map(|r| r.detector_id.clone()),
            completed_at: result.map(|r| r.completed_at),
            failure_reason: job.failure_reason.clone().filter(|_| job.state == JobState::Failed),
        }
    }
}

impl JobView {
    /// The inference result, if the job has completed.
    pub fn result(&self) -> Option<InferenceResult> {
        Some(InferenceResult::new(
            self.job_id.clone(),
            self.detections.clone()?,
            self.completed_at?,
            self.detector_id.clone()?,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error_code: String,
    pub message: String,
}
