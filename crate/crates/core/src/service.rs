//! Application operations: load an exam, apply one workflow step, persist it
//! with compare-and-swap. The HTTP gateway is a thin mapping onto these.

use std::sync::Arc;

use chrono::Utc;
use thiserror::Error;

use crate::domain::{
    BlobRef, ExamError, ExamRecord, FootRecord, FootSide, InferenceResult, PatientRef, PhotographMeta,
};
use crate::imaging::decode_png;
use crate::queue::{self, Job, JobQueue, QueueError, QueueStats};
use crate::store::{self, Store, StoreError};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Exam(#[from] ExamError),
    #[error("exam {0} not found")]
    ExamNotFound(String),
    #[error("job {0} not found")]
    JobNotFound(String),
    #[error("patient {0} is not registered")]
    UnknownPatient(String),
    #[error("patient id must be non-empty")]
    InvalidPatientId,
    #[error("photo is not a valid PNG: {0}")]
    BadImage(String),
    #[error("photo of {size} bytes exceeds the {max}-byte limit")]
    TooLarge { size: u64, max: u64 },
    #[error("the exam was modified concurrently; reload and retry")]
    VersionConflict,
    #[error("an inference job is already queued for this foot")]
    DuplicateJob,
    #[error("{0}")]
    InvalidJobState(String),
    #[error("storage failure: {0}")]
    Storage(String),
}

/// Coarse classification used to pick transport status codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Invalid,
    NotFound,
    Conflict,
    Unavailable,
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::Exam(e) => e.code(),
            ServiceError::ExamNotFound(_) => "ExamNotFound",
            ServiceError::JobNotFound(_) => "JobNotFound",
            ServiceError::UnknownPatient(_) => "UnknownPatient",
            ServiceError::InvalidPatientId => "InvalidPatientId",
            ServiceError::BadImage(_) => "BadImage",
            ServiceError::TooLarge { .. } => "TooLarge",
            ServiceError::VersionConflict => "VersionConflict",
            ServiceError::DuplicateJob => "DuplicateJob",
            ServiceError::InvalidJobState(_) => "InvalidState",
            ServiceError::Storage(_) => "StorageFailure",
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            ServiceError::Exam(ExamError::NegativeCount)
            | ServiceError::InvalidPatientId
            | ServiceError::BadImage(_)
            | ServiceError::TooLarge { .. } => ErrorKind::Invalid,
            ServiceError::ExamNotFound(_) | ServiceError::JobNotFound(_) | ServiceError::UnknownPatient(_) => {
                ErrorKind::NotFound
            }
            ServiceError::Exam(_)
            | ServiceError::VersionConflict
            | ServiceError::DuplicateJob
            | ServiceError::InvalidJobState(_) => ErrorKind::Conflict,
            ServiceError::Storage(_) => ErrorKind::Unavailable,
        }
    }
}

impl From<StoreError> for ServiceError {
    fn from(err: StoreError) -> Self {
        match err {
            StoreError::VersionConflict { .. } => ServiceError::VersionConflict,
            StoreError::TooLarge { size, max } => ServiceError::TooLarge { size, max },
            StoreError::EmptyPhoto => ServiceError::BadImage("empty payload".into()),
            other => ServiceError::Storage(other.to_string()),
        }
    }
}

impl From<QueueError> for ServiceError {
    fn from(err: QueueError) -> Self {
        match err {
            QueueError::DuplicateJob { .. } => ServiceError::DuplicateJob,
            QueueError::UnknownJob(id) => ServiceError::JobNotFound(id),
            e @ QueueError::InvalidState { .. } => ServiceError::InvalidJobState(e.to_string()),
            QueueError::UnknownPhoto(id) => ServiceError::Storage(format!("photo {id} missing")),
            QueueError::Store(e) => e.into(),
        }
    }
}

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

/// Conflicting saves are retried this many extra times before surfacing.
const CONFLICT_RETRIES: usize = 1;

#[derive(Debug, Clone)]
pub struct ExamService {
    store: Arc<Store>,
    queue: JobQueue,
}

impl ExamService {
    pub fn new(queue: JobQueue) -> Self {
        Self {
            store: queue.store().clone(),
            queue,
        }
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn queue(&self) -> &JobQueue {
        &self.queue
    }

    pub fn register_patient(&self, patient_id: &str) -> Result<PatientRef> {
        let patient = PatientRef::new(patient_id).map_err(|_| ServiceError::InvalidPatientId)?;
        self.store.add_patient(&patient)?;
        Ok(patient)
    }

    pub fn create_exam(&self, patient_id: &str) -> Result<ExamRecord> {
        let patient = PatientRef::new(patient_id).map_err(|_| ServiceError::InvalidPatientId)?;
        if !self.store.patient_exists(&patient.patient_id)? {
            return Err(ServiceError::UnknownPatient(patient.patient_id));
        }
        let exam = ExamRecord::new(store::new_id(), patient, Utc::now());
        self.store.save_exam(&exam, 0)?;
        Ok(exam)
    }

    pub fn exam(&self, exam_id: &str) -> Result<(ExamRecord, u64)> {
        self.store.load_exam(exam_id).map_err(|e| match e {
            StoreError::NotFound(_) => ServiceError::ExamNotFound(exam_id.into()),
            other => other.into(),
        })
    }

    /// Loads, applies `step`, and saves with CAS. An unchanged record is not
    /// rewritten.
    fn mutate(&self, exam_id: &str, step: impl Fn(&ExamRecord) -> Result<ExamRecord>) -> Result<ExamRecord> {
        let mut attempt = 0;
        loop {
            let (exam, version) = self.exam(exam_id)?;
            let next = step(&exam)?;
            if next == exam {
                return Ok(next);
            }
            match self.store.save_exam(&next, version) {
                Ok(_) => return Ok(next),
                Err(StoreError::VersionConflict { .. }) if attempt < CONFLICT_RETRIES => attempt += 1,
                Err(e) => return Err(e.into()),
            }
        }
    }

    pub fn record_foot_details(
        &self,
        exam_id: &str,
        side: FootSide,
        checked: bool,
        visible_ulcer_count: i64,
    ) -> Result<FootRecord> {
        let exam = self.mutate(exam_id, |e| {
            Ok(e.record_foot_details(side, checked, visible_ulcer_count)?)
        })?;
        Ok(exam.foot(side).cloned().expect("foot just recorded"))
    }

    /// Validates and stores a PNG for one foot, attaches it to the exam and
    /// enqueues its inference job, all in one transaction.
    pub fn upload_photo(&self, exam_id: &str, side: FootSide, png: &[u8]) -> Result<(PhotographMeta, Job)> {
        let max = self.store.config().max_photo_bytes;
        let size = png.len() as u64;
        if size > max {
            return Err(ServiceError::TooLarge { size, max });
        }
        if png.is_empty() {
            return Err(ServiceError::BadImage("empty payload".into()));
        }
        let raster = decode_png(png).map_err(|e| ServiceError::BadImage(e.to_string()))?;

        let mut attempt = 0;
        loop {
            let (exam, version) = self.exam(exam_id)?;
            let photo_id = store::new_id();
            let meta = PhotographMeta {
                blob: BlobRef {
                    strategy: self.store.config().blob_strategy,
                    key: photo_id.clone(),
                },
                photo_id,
                width: raster.width(),
                height: raster.height(),
                byte_size: size,
                uploaded_at: Utc::now(),
            };
            let next = exam.attach_photo(side, meta.clone())?;

            let staged = self.store.stage_photo(png, &meta.photo_id)?;
            let committed = self.store.write(|tx| {
                staged.insert(tx)?;
                store::save_exam_tx(tx, &next, version)?;
                queue::enqueue_tx(tx, exam_id, side, &meta.photo_id)
            });
            match committed {
                Ok(job) => return Ok((meta, job)),
                Err(e) => {
                    staged.discard();
                    let conflict = matches!(e, QueueError::Store(StoreError::VersionConflict { .. }));
                    if conflict && attempt < CONFLICT_RETRIES {
                        attempt += 1;
                        continue;
                    }
                    return Err(e.into());
                }
            }
        }
    }

    /// Stores an inference result on its exam. A result already stored by
    /// the same job with the same detections is accepted unchanged, so a
    /// retried job is idempotent.
    pub fn record_result(&self, exam_id: &str, side: FootSide, result: &InferenceResult) -> Result<()> {
        self.mutate(exam_id, |exam| {
            let already = exam.foot(side).and_then(|f| f.result.as_ref());
            if already.is_some_and(|stored| stored.same_outcome(result)) {
                return Ok(exam.clone());
            }
            Ok(exam.record_result(side, result.clone())?)
        })?;
        Ok(())
    }

    pub fn record_confirmation(&self, exam_id: &str, side: FootSide, agrees: bool) -> Result<FootRecord> {
        let exam = self.mutate(exam_id, |e| Ok(e.record_confirmation(side, agrees, Utc::now())?))?;
        Ok(exam.foot(side).cloned().expect("foot has a confirmation"))
    }

    pub fn complete_exam(&self, exam_id: &str) -> Result<ExamRecord> {
        self.mutate(exam_id, |e| Ok(e.complete_exam(Utc::now())?))
    }

    pub fn job(&self, job_id: &str) -> Result<Job> {
        Ok(self.queue.get(job_id)?)
    }

    pub fn queue_stats(&self) -> Result<QueueStats> {
        Ok(self.queue.stats()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::ExamState;
    use crate::queue::{JobState, QueueConfig};
    use crate::store::StoreConfig;
    use crate::synthetic::demo_photo_png;
    use tempfile::TempDir;

    fn service() -> (TempDir, ExamService) {
        let dir = TempDir::new().unwrap();
        let store = Arc::new(Store::open(StoreConfig::in_dir(dir.path())).unwrap());
        let svc = ExamService::new(JobQueue::new(store, QueueConfig::default()));
        svc.register_patient("P001").unwrap();
        (dir, svc)
    }

    #[test]
    fn exams_need_registered_patients() {
        let (_d, svc) = service();
        assert!(matches!(
            svc.create_exam("nobody"),
            Err(ServiceError::UnknownPatient(_))
        ));
        let a = svc.create_exam("P001").unwrap();
        let b = svc.create_exam("P001").unwrap();
        assert_ne!(a.exam_id, b.exam_id);
        assert_eq!(svc.exam(&a.exam_id).unwrap().1, 1);
    }

    #[test]
    fn upload_stores_blob_and_job_atomically() {
        let (_d, svc) = service();
        let exam = svc.create_exam("P001").unwrap();
        svc.record_foot_details(&exam.exam_id, FootSide::Left, true, 1).unwrap();
        let png = demo_photo_png().unwrap();
        let (meta, job) = svc.upload_photo(&exam.exam_id, FootSide::Left, &png).unwrap();
        assert_eq!(job.state, JobState::Pending);
        assert_eq!(job.photo_id, meta.photo_id);
        assert_eq!((meta.width, meta.height, meta.byte_size), (100, 100, 61_440));
        assert_eq!(svc.store().fetch_photo(&meta.blob).unwrap(), png);

        let err = svc.upload_photo(&exam.exam_id, FootSide::Left, &png).unwrap_err();
        assert_eq!(err.code(), "DuplicateUpload");
        assert_eq!(svc.queue_stats().unwrap().total(), 1);
    }

    #[test]
    fn upload_validation() {
        let (_d, svc) = service();
        let exam = svc.create_exam("P001").unwrap();
        let png = demo_photo_png().unwrap();
        assert_eq!(
            svc.upload_photo(&exam.exam_id, FootSide::Left, &png)
                .unwrap_err()
                .code(),
            "NoFootDetails"
        );
        svc.record_foot_details(&exam.exam_id, FootSide::Left, true, 1).unwrap();
        assert_eq!(
            svc.upload_photo(&exam.exam_id, FootSide::Left, b"nope")
                .unwrap_err()
                .code(),
            "BadImage"
        );
        let huge = vec![0u8; 6 * 1024 * 1024];
        assert_eq!(
            svc.upload_photo(&exam.exam_id, FootSide::Left, &huge)
                .unwrap_err()
                .code(),
            "TooLarge"
        );
        assert_eq!(
            svc.upload_photo("missing", FootSide::Left, &png).unwrap_err().code(),
            "ExamNotFound"
        );
    }

    #[test]
    fn full_flow_through_service() {
        let (_d, svc) = service();
        let exam = svc.create_exam("P001").unwrap();
        let id = exam.exam_id.as_str();
        svc.record_foot_details(id, FootSide::Left, true, 1).unwrap();
        let (_, job) = svc
            .upload_photo(id, FootSide::Left, &demo_photo_png().unwrap())
            .unwrap();
        assert_eq!(svc.complete_exam(id).unwrap_err().code(), "PendingInference");
        assert_eq!(
            svc.record_confirmation(id, FootSide::Left, true).unwrap_err().code(),
            "NoResult"
        );

        let result = InferenceResult::new(job.job_id.clone(), vec![], Utc::now(), "test");
        svc.record_result(id, FootSide::Left, &result).unwrap();
        // a retried job writing the same outcome is a no-op
        let retried = InferenceResult::new(job.job_id.clone(), vec![], Utc::now(), "test");
        let version_before = svc.exam(id).unwrap().1;
        svc.record_result(id, FootSide::Left, &retried).unwrap();
        assert_eq!(svc.exam(id).unwrap().1, version_before);
        // a different job's result is rejected
        let other = InferenceResult::new("other-job", vec![], Utc::now(), "test");
        assert_eq!(
            svc.record_result(id, FootSide::Left, &other).unwrap_err().code(),
            "DuplicateResult"
        );

        svc.record_confirmation(id, FootSide::Left, false).unwrap();
        assert_eq!(
            svc.record_confirmation(id, FootSide::Left, true).unwrap_err().code(),
            "DuplicateConfirmation"
        );
        let done = svc.complete_exam(id).unwrap();
        assert_eq!(done.state, ExamState::Completed);
        assert_eq!(svc.complete_exam(id).unwrap_err().code(), "ExamCompleted");
    }

    #[test]
    fn error_kinds() {
        assert_eq!(ServiceError::Exam(ExamError::NegativeCount).kind(), ErrorKind::Invalid);
        assert_eq!(ServiceError::Exam(ExamError::CheckedLocked).kind(), ErrorKind::Conflict);
        assert_eq!(ServiceError::Exam(ExamError::NoFootDetails).kind(), ErrorKind::Conflict);
        assert_eq!(ServiceError::UnknownPatient("x".into()).kind(), ErrorKind::NotFound);
        assert_eq!(ServiceError::Storage("x".into()).kind(), ErrorKind::Unavailable);
    }
}
