//! Blocking client for the footscan REST API.
//!
//! Each method maps to one endpoint, except [`Client::submit_foot_exam`] and
//! [`Client::await_result`] which string a few together. Nothing is
//! validated locally; rule violations come back as [`ClientError::Server`]
//! carrying the server's error code.

use std::thread;
use std::time::{Duration, Instant};

use base64::Engine;
use footscan_core::domain::{ExamRecord, FootRecord, FootSide, InferenceResult};
use footscan_core::queue::JobState;
use footscan_core::wire::{
    ConfirmationRequest, CreateExamRequest, CreateExamResponse, ErrorBody, FootDetailsRequest, JobView,
    PhotoUploadRequest, PhotoUploadResponse, StatusReport, VersionCheck,
};
use reqwest::blocking::{RequestBuilder, Response};
use reqwest::Method;
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

pub const DEFAULT_POLL_EVERY: Duration = Duration::from_millis(500);
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("cannot reach server: {0}")]
    ConnectionFailed(String),
    #[error("client version {client} is older than the minimum supported {min_supported}")]
    IncompatibleVersion { client: String, min_supported: String },
    #[error("server rejected request ({status} {code}): {message}")]
    Server { status: u16, code: String, message: String },
    #[error("job failed: {0}")]
    JobFailed(String),
    #[error("job {job_id} not finished after {waited:?}")]
    Timeout { job_id: String, waited: Duration },
    #[error("unexpected response: {0}")]
    InvalidResponse(String),
}

impl ClientError {
    /// The server's error code, for [`ClientError::Server`].
    pub fn code(&self) -> Option<&str> {
        match self {
            ClientError::Server { code, .. } => Some(code),
            _ => None,
        }
    }
}

impl From<reqwest::Error> for ClientError {
    fn from(err: reqwest::Error) -> Self {
        if err.is_decode() {
            ClientError::InvalidResponse(err.to_string())
        } else {
            ClientError::ConnectionFailed(err.to_string())
        }
    }
}

pub type Result<T, E = ClientError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerCheck {
    pub status: StatusReport,
    pub compatible: bool,
}

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    token: String,
    http: reqwest::blocking::Client,
}

impl Client {
    pub fn new(base_url: &str, token: &str) -> Result<Client> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .map_err(|e| ClientError::ConnectionFailed(e.to_string()))?;
        Ok(Client {
            base: base_url.trim_end_matches('/').to_string(),
            token: token.to_string(),
            http,
        })
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn request(&self, method: Method, path: &str) -> RequestBuilder {
        self.http
            .request(method, format!("{}{}", self.base, path))
            .bearer_auth(&self.token)
    }

    fn send<T: DeserializeOwned>(&self, req: RequestBuilder) -> Result<T> {
        decode(req.send()?)
    }

    fn send_json<B: Serialize, T: DeserializeOwned>(&self, method: Method, path: &str, body: &B) -> Result<T> {
        self.send(self.request(method, path).json(body))
    }

    pub fn status(&self) -> Result<StatusReport> {
        self.send(self.http.get(format!("{}/api/v1/status", self.base)))
    }

    pub fn version(&self, client_version: &str) -> Result<VersionCheck> {
        self.send(
            self.request(Method::GET, "/api/v1/version")
                .query(&[("client", client_version)]),
        )
    }

    /// Combines the status and version endpoints. An incompatible client is
    /// an error.
    pub fn check_server(&self, client_version: &str) -> Result<ServerCheck> {
        let status = self.status()?;
        let version = self.version(client_version)?;
        if !version.compatible {
            return Err(ClientError::IncompatibleVersion {
                client: client_version.to_string(),
                min_supported: version.min_supported,
            });
        }
        Ok(ServerCheck {
            status,
            compatible: true,
        })
    }

    pub fn create_exam(&self, patient_id: &str) -> Result<String> {
        let body = CreateExamRequest {
            patient_id: patient_id.to_string(),
        };
        let created: CreateExamResponse = self.send_json(Method::POST, "/api/v1/exams", &body)?;
        Ok(created.exam_id)
    }

    pub fn exam(&self, exam_id: &str) -> Result<ExamRecord> {
        self.send(self.request(Method::GET, &format!("/api/v1/exams/{exam_id}")))
    }

    pub fn record_foot_details(
        &self,
        exam_id: &str,
        side: FootSide,
        checked: bool,
        visible_ulcer_count: i64,
    ) -> Result<FootRecord> {
        let body = FootDetailsRequest {
            checked,
            visible_ulcer_count,
        };
        self.send_json(Method::PUT, &format!("/api/v1/exams/{exam_id}/feet/{side}"), &body)
    }

    pub fn upload_photo(&self, exam_id: &str, side: FootSide, png: &[u8]) -> Result<PhotoUploadResponse> {
        let body = PhotoUploadRequest {
            png_base64: base64::engine::general_purpose::STANDARD.encode(png),
        };
        self.send_json(
            Method::POST,
            &format!("/api/v1/exams/{exam_id}/feet/{side}/photo"),
            &body,
        )
    }

    /// Records the foot's details and uploads its photo. Returns the job id.
    pub fn submit_foot_exam(
        &self,
        exam_id: &str,
        side: FootSide,
        checked: bool,
        visible_ulcer_count: i64,
        png: &[u8],
    ) -> Result<String> {
        self.record_foot_details(exam_id, side, checked, visible_ulcer_count)?;
        Ok(self.upload_photo(exam_id, side, png)?.job_id)
    }

    pub fn job(&self, job_id: &str) -> Result<JobView> {
        self.send(self.request(Method::GET, &format!("/api/v1/jobs/{job_id}")))
    }

    /// Polls the job until it completes, fails, or `timeout` runs out. The
    /// job is always polled at least once.
    pub fn await_result(&self, job_id: &str, timeout: Duration, poll_every: Duration) -> Result<InferenceResult> {
        let started = Instant::now();
        loop {
            let view = self.job(job_id)?;
            match view.state {
                JobState::Complete => {
                    return view
                        .result()
                        .ok_or_else(|| ClientError::InvalidResponse("complete job without detections".into()))
                }
                JobState::Failed => {
                    return Err(ClientError::JobFailed(view.failure_reason.unwrap_or_default()));
                }
                JobState::Pending | JobState::InProgress => {}
            }
            let waited = started.elapsed();
            if waited >= timeout {
                return Err(ClientError::Timeout {
                    job_id: job_id.to_string(),
                    waited,
                });
            }
            thread::sleep(poll_every.min(timeout - waited));
        }
    }

    pub fn confirm(&self, exam_id: &str, side: FootSide, agrees: bool) -> Result<FootRecord> {
        self.send_json(
            Method::POST,
            &format!("/api/v1/exams/{exam_id}/feet/{side}/confirmation"),
            &ConfirmationRequest { agrees },
        )
    }

    pub fn complete_exam(&self, exam_id: &str) -> Result<ExamRecord> {
        self.send(self.request(Method::POST, &format!("/api/v1/exams/{exam_id}/complete")))
    }
}

fn decode<T: DeserializeOwned>(resp: Response) -> Result<T> {
    let status = resp.status();
    let bytes = resp.bytes()?;
    if status.is_success() {
        return serde_json::from_slice(&bytes).map_err(|e| ClientError::InvalidResponse(e.to_string()));
    }
    match serde_json::from_slice::<ErrorBody>(&bytes) {
        Ok(body) => Err(ClientError::Server {
            status: status.as_u16(),
            code: body.error_code,
            message: body.message,
        }),
        Err(_) => Err(ClientError::InvalidResponse(format!(
            "status {status} with body {:?}",
            String::from_utf8_lossy(&bytes)
        ))),
    }
}
