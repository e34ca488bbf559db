//! Differential driver: the same operation sequence goes to a live server
//! over HTTP and straight to an [`ExamRecord`], and the two must agree on
//! every error code and on the resulting exam.

use std::collections::BTreeMap;
use std::sync::Arc;

use base64::Engine;
use chrono::Utc;
use footscan_core::detector::{detect, Detection, DetectorConfig, RednessDetector};
use footscan_core::domain::{BlobRef, BlobStrategy, ExamRecord, FootSide, InferenceResult, PatientRef, PhotographMeta};
use footscan_core::queue::{JobQueue, QueueConfig};
use footscan_core::service::ExamService;
use footscan_core::store::{Store, StoreConfig};
use footscan_core::synthetic::{demo_photo_png, planted_square};
use footscan_core::worker::{Worker, WorkerConfig};
use footscan_server::{AppState, ServerHandle, VersionPolicy};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use reqwest::blocking::Client;
use reqwest::Method;
use serde_json::{json, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WireOp {
    Details {
        side: FootSide,
        checked: bool,
        count: i64,
    },
    Photo(FootSide),
    /// Upload bytes that are not a PNG.
    BadPhoto(FootSide),
    /// Let the worker drain the queue.
    Infer,
    Confirm {
        side: FootSide,
        agrees: bool,
    },
    Complete,
    /// Foot details addressed to a side that does not exist.
    BadSide,
    /// Foot details with a body that is not JSON.
    MalformedBody(FootSide),
}

pub fn random_op(rng: &mut StdRng) -> WireOp {
    let side = if rng.gen_bool(0.5) {
        FootSide::Left
    } else {
        FootSide::Right
    };
    match rng.gen_range(0..100) {
        0..=27 => WireOp::Details {
            side,
            checked: rng.gen_bool(0.7),
            count: rng.gen_range(-1..=2),
        },
        28..=45 => WireOp::Photo(side),
        46..=49 => WireOp::BadPhoto(side),
        50..=64 => WireOp::Infer,
        65..=81 => WireOp::Confirm {
            side,
            agrees: rng.gen_bool(0.5),
        },
        82..=93 => WireOp::Complete,
        94..=96 => WireOp::BadSide,
        _ => WireOp::MalformedBody(side),
    }
}

/// The parts of a foot both paths must agree on. Ids and timestamps are
/// generated independently and so are left out.
#[derive(Debug, Clone, PartialEq)]
pub struct FootView {
    pub checked: bool,
    pub count: u32,
    pub has_photo: bool,
    pub detections: Option<Vec<Detection>>,
    pub agrees: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExamView {
    pub left: Option<FootView>,
    pub right: Option<FootView>,
    pub completed: bool,
}

pub fn project(exam: &ExamRecord) -> ExamView {
    let foot = |side| {
        exam.foot(side).map(|f| FootView {
            checked: f.checked,
            count: f.visible_ulcer_count,
            has_photo: f.photo.is_some(),
            detections: f.result.as_ref().map(|r| r.detections.clone()),
            agrees: f.confirmation.as_ref().map(|c| c.agrees),
        })
    };
    ExamView {
        left: foot(FootSide::Left),
        right: foot(FootSide::Right),
        completed: exam.is_completed(),
    }
}

/// Applies operations directly to a record.
struct Reference {
    exam: ExamRecord,
    detections: Vec<Detection>,
    photos: usize,
}

impl Reference {
    fn new() -> Self {
        Self {
            exam: ExamRecord::new("reference", PatientRef::new("P001").unwrap(), Utc::now()),
            detections: detect(&planted_square(), &DetectorConfig::default()).unwrap(),
            photos: 0,
        }
    }

    fn apply(&mut self, op: WireOp) -> Result<(), String> {
        let code = |e: footscan_core::domain::ExamError| e.code().to_string();
        let next = match op {
            WireOp::Details { side, checked, count } => {
                self.exam.record_foot_details(side, checked, count).map_err(code)?
            }
            WireOp::Photo(side) => {
                self.photos += 1;
                let id = format!("ref{}", self.photos);
                let meta = PhotographMeta {
                    photo_id: id.clone(),
                    blob: BlobRef {
                        strategy: BlobStrategy::Inline,
                        key: id,
                    },
                    width: 100,
                    height: 100,
                    byte_size: 0,
                    uploaded_at: Utc::now(),
                };
                self.exam.attach_photo(side, meta).map_err(code)?
            }
            WireOp::BadPhoto(_) => return Err("BadImage".into()),
            WireOp::Infer => {
                let mut exam = self.exam.clone();
                for side in FootSide::ALL {
                    let waiting = exam.foot(side).is_some_and(|f| f.photo.is_some() && f.result.is_none());
                    if waiting {
                        let result = InferenceResult::new("ref", self.detections.clone(), Utc::now(), "ref");
                        exam = exam.record_result(side, result).map_err(code)?;
                    }
                }
                exam
            }
            WireOp::Confirm { side, agrees } => {
                self.exam.record_confirmation(side, agrees, Utc::now()).map_err(code)?
            }
            WireOp::Complete => self.exam.complete_exam(Utc::now()).map_err(code)?,
            WireOp::BadSide => return Err("InvalidSide".into()),
            WireOp::MalformedBody(_) => return Err("BadRequest".into()),
        };
        self.exam = next;
        Ok(())
    }
}

#[derive(Debug, Default)]
pub struct DiffReport {
    pub sequences: usize,
    pub operations: usize,
    pub completed_exams: usize,
    /// How often each outcome was seen; "ok" for success.
    pub outcomes: BTreeMap<String, usize>,
    pub mismatches: Vec<String>,
}

impl DiffReport {
    pub fn is_clean(&self) -> bool {
        self.mismatches.is_empty()
    }
}

struct Live {
    _dir: tempfile::TempDir,
    server: ServerHandle,
    worker: Worker,
    http: Client,
    png_base64: String,
}

const TOKEN: &str = "differential";

impl Live {
    fn start() -> Result<Live, String> {
        let dir = tempfile::TempDir::new().map_err(|e| e.to_string())?;
        let store = Store::open(StoreConfig::object_store_in_dir(dir.path())).map_err(|e| e.to_string())?;
        let queue = JobQueue::new(Arc::new(store), QueueConfig::default());
        let service = ExamService::new(queue.clone());
        service.register_patient("P001").map_err(|e| e.to_string())?;
        let state = AppState::new(service, TOKEN, VersionPolicy::default());
        let server = ServerHandle::start("127.0.0.1:0".parse().unwrap(), state).map_err(|e| e.to_string())?;
        let detector = Arc::new(RednessDetector::new(DetectorConfig::default()).map_err(|e| e.to_string())?);
        let png = demo_photo_png().map_err(|e| e.to_string())?;
        Ok(Live {
            _dir: dir,
            server,
            worker: Worker::new("diff", queue, detector, WorkerConfig::default()),
            http: Client::new(),
            png_base64: base64::engine::general_purpose::STANDARD.encode(png),
        })
    }

    fn call(&self, method: Method, path: &str, body: Option<String>) -> Result<(u16, Value), String> {
        let mut req = self
            .http
            .request(method, format!("{}{}", self.server.base_url(), path))
            .bearer_auth(TOKEN);
        if let Some(body) = body {
            req = req.header("content-type", "application/json").body(body);
        }
        let resp = req.send().map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let value = resp.json().map_err(|e| format!("{path}: body is not JSON: {e}"))?;
        Ok((status, value))
    }

    fn create_exam(&self) -> Result<String, String> {
        let (status, body) = self.call(
            Method::POST,
            "/api/v1/exams",
            Some(json!({"patient_id": "P001"}).to_string()),
        )?;
        match (status, body["exam_id"].as_str()) {
            (201, Some(id)) => Ok(id.to_string()),
            _ => Err(format!("create exam failed: {status} {body}")),
        }
    }

    fn exam(&self, exam_id: &str) -> Result<ExamRecord, String> {
        let (_, body) = self.call(Method::GET, &format!("/api/v1/exams/{exam_id}"), None)?;
        serde_json::from_value(body).map_err(|e| e.to_string())
    }

    /// Sends `op`; returns the error code on rejection.
    fn apply(&self, exam: &str, op: WireOp) -> Result<Result<(), String>, String> {
        let (method, path, body) = match op {
            WireOp::Details { side, checked, count } => (
                Method::PUT,
                format!("/api/v1/exams/{exam}/feet/{side}"),
                Some(json!({"checked": checked, "visible_ulcer_count": count}).to_string()),
            ),
            WireOp::Photo(side) => (
                Method::POST,
                format!("/api/v1/exams/{exam}/feet/{side}/photo"),
                Some(json!({"png_base64": self.png_base64}).to_string()),
            ),
            WireOp::BadPhoto(side) => (
                Method::POST,
                format!("/api/v1/exams/{exam}/feet/{side}/photo"),
                Some(json!({"png_base64": "bm90IGEgcG5n"}).to_string()),
            ),
            WireOp::Infer => {
                while self.worker.run_once().map_err(|e| e.to_string())?.processed {}
                return Ok(Ok(()));
            }
            WireOp::Confirm { side, agrees } => (
                Method::POST,
                format!("/api/v1/exams/{exam}/feet/{side}/confirmation"),
                Some(json!({ "agrees": agrees }).to_string()),
            ),
            WireOp::Complete => (Method::POST, format!("/api/v1/exams/{exam}/complete"), None),
            WireOp::BadSide => (
                Method::PUT,
                format!("/api/v1/exams/{exam}/feet/middle"),
                Some(json!({"checked": true, "visible_ulcer_count": 0}).to_string()),
            ),
            WireOp::MalformedBody(side) => (
                Method::PUT,
                format!("/api/v1/exams/{exam}/feet/{side}"),
                Some("{\"checked\": tru".to_string()),
            ),
        };
        let (status, body) = self.call(method, &path, body)?;
        if (200..300).contains(&status) {
            return Ok(Ok(()));
        }
        match (body["error_code"].as_str(), body["message"].as_str()) {
            (Some(code), Some(_)) => Ok(Err(code.to_string())),
            _ => Err(format!("{path}: error {status} without error body: {body}")),
        }
    }
}

/// Runs `sequences` random sequences of up to `max_len` operations, each on
/// a fresh exam of one live server.
pub fn run_differential(sequences: usize, max_len: usize, seed: u64) -> Result<DiffReport, String> {
    let live = Live::start()?;
    let mut rng = StdRng::seed_from_u64(seed);
    let mut report = DiffReport::default();
    for n in 0..sequences {
        let exam_id = live.create_exam()?;
        let mut reference = Reference::new();
        let len = rng.gen_range(1..=max_len);
        let mut path = Vec::with_capacity(len);
        for _ in 0..len {
            let op = random_op(&mut rng);
            path.push(op);
            let expected = reference.apply(op);
            let actual = live.apply(&exam_id, op)?;
            report.operations += 1;
            *report
                .outcomes
                .entry(actual.as_ref().err().cloned().unwrap_or_else(|| "ok".into()))
                .or_default() += 1;
            if expected != actual {
                report
                    .mismatches
                    .push(format!("sequence {n} {path:?}: direct {expected:?}, http {actual:?}"));
            }
            let served = project(&live.exam(&exam_id)?);
            if served != project(&reference.exam) {
                report.mismatches.push(format!(
                    "sequence {n} {path:?}: state differs\n  direct {:?}\n  http   {served:?}",
                    project(&reference.exam)
                ));
                break;
            }
        }
        report.sequences += 1;
        report.completed_exams += usize::from(reference.exam.is_completed());
    }
    Ok(report)
}
