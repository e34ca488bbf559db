//! Core of the footscan remote ulcer-triage service.
//!
//! - [`domain`]: exam records and the clinician workflow rules
//! - [`detector`]: pluggable ulcer detector plus the deterministic reference
//! - [`store`]: durable records and photo blobs
//! - [`queue`]: persistent FIFO inference queue
//! - [`worker`]: the polling inference worker
//! - [`service`]: the application operations the HTTP layer exposes
//! - [`wire`]: JSON request and response bodies

pub mod detector;
pub mod domain;
pub mod imaging;
pub mod queue;
pub mod service;
pub mod store;
pub mod synthetic;
pub mod wire;
pub mod worker;

pub use detector::{BoundingBox, Detection, Detector, DetectorConfig, RasterImage, RednessDetector};
pub use domain::{
    BlobRef, BlobStrategy, ExamError, ExamRecord, ExamState, FootRecord, FootSide, InferenceResult, PatientRef,
    PhotographMeta,
};
pub use queue::{Job, JobQueue, JobState, QueueConfig, QueueError, QueueStats};
pub use service::{ExamService, ServiceError};
pub use store::{Store, StoreConfig, StoreError};
pub use worker::{RunOutcome, ShutdownSignal, Worker, WorkerConfig, WorkerError};
