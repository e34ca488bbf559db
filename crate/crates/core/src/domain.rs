//! Exam records and the clinician workflow state machine.
//!
//! Every operation takes the current record by reference and returns either a
//! new record or a typed [`ExamError`]. A rejected operation never touches the
//! input, so callers can keep using the prior value unchanged.
//!
//! Per foot the only legal progression is
//! details → photo → result → confirmation. Once a photo is attached the
//! tickbox and the ulcer count are frozen for that side, and a side never
//! receives a second photo.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::Detection;

/// Reference to a registered patient.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRef {
    pub patient_id: String,
}

impl PatientRef {
    pub fn new(patient_id: impl Into<String>) -> Result<Self, InvalidPatientId> {
        let patient_id = patient_id.into();
        if patient_id.trim().is_empty() {
            return Err(InvalidPatientId);
        }
        Ok(Self { patient_id })
    }

    /// The string encoded into the patient's QR code. It is the patient id itself.
    pub fn qr_payload(&self) -> String {
        self.patient_id.clone()
    }

    /// Inverse of [`PatientRef::qr_payload`]. Surrounding whitespace from a
    /// pasted payload is ignored.
    pub fn from_qr_payload(payload: &str) -> Result<Self, InvalidPatientId> {
        Self::new(payload.trim())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("patient id must be non-empty")]
pub struct InvalidPatientId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FootSide {
    Left,
    Right,
}

impl FootSide {
    pub const ALL: [FootSide; 2] = [FootSide::Left, FootSide::Right];

    pub fn as_str(self) -> &'static str {
        match self {
            FootSide::Left => "left",
            FootSide::Right => "right",
        }
    }
}

impl fmt::Display for FootSide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown foot side {0:?}; expected \"left\" or \"right\"")]
pub struct InvalidSide(pub String);

impl FromStr for FootSide {
    type Err = InvalidSide;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "left" => Ok(FootSide::Left),
            "right" => Ok(FootSide::Right),
            other => Err(InvalidSide(other.to_string())),
        }
    }
}

/// Where the bytes of a photograph live.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BlobStrategy {
    /// Stored as a BLOB column next to the rest of the records.
    #[default]
    Inline,
    /// Stored as a file under a unique id in a separate object store.
    ObjectStore,
}

impl BlobStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            BlobStrategy::Inline => "inline",
            BlobStrategy::ObjectStore => "object_store",
        }
    }
}

impl FromStr for BlobStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "inline" => Ok(BlobStrategy::Inline),
            "object_store" | "object-store" => Ok(BlobStrategy::ObjectStore),
            other => Err(format!("unknown blob strategy {other:?}")),
        }
    }
}

/// Strategy-tagged handle to stored photo bytes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlobRef {
    pub strategy: BlobStrategy,
    pub key: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhotographMeta {
    pub photo_id: String,
    pub blob: BlobRef,
    pub width: u32,
    pub height: u32,
    pub byte_size: u64,
    pub uploaded_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub job_id: String,
    pub detections: Vec<Detection>,
    pub completed_at: DateTime<Utc>,
    pub detector_id: String,
}

impl InferenceResult {
    /// Builds a result with detections put into canonical order.
    pub fn new(
        job_id: impl Into<String>,
        mut detections: Vec<Detection>,
        completed_at: DateTime<Utc>,
        detector_id: impl Into<String>,
    ) -> Self {
        crate::detector::sort_detections(&mut detections);
        Self {
            job_id: job_id.into(),
            detections,
            completed_at,
            detector_id: detector_id.into(),
        }
    }

    /// True when `other` is the output of the same job with the same content,
    /// regardless of when it was produced.
    pub fn same_outcome(&self, other: &InferenceResult) -> bool {
        self.job_id == other.job_id && self.detector_id == other.detector_id && self.detections == other.detections
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfirmationRecord {
    pub agrees: bool,
    pub recorded_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FootRecord {
    pub side: FootSide,
    pub checked: bool,
    pub visible_ulcer_count: u32,
    pub photo: Option<PhotographMeta>,
    pub result: Option<InferenceResult>,
    pub confirmation: Option<ConfirmationRecord>,
}

impl FootRecord {
    fn new(side: FootSide, checked: bool, visible_ulcer_count: u32) -> Self {
        Self {
            side,
            checked,
            visible_ulcer_count,
            photo: None,
            result: None,
            confirmation: None,
        }
    }

    /// A foot is adjudicated when it either has no photo or its photo has
    /// both a result and a clinician confirmation.
    pub fn is_adjudicated(&self) -> bool {
        self.photo.is_none() || (self.result.is_some() && self.confirmation.is_some())
    }
}

/// Both feet of one exam.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Feet {
    pub left: Option<FootRecord>,
    pub right: Option<FootRecord>,
}

impl Feet {
    pub fn get(&self, side: FootSide) -> Option<&FootRecord> {
        match side {
            FootSide::Left => self.left.as_ref(),
            FootSide::Right => self.right.as_ref(),
        }
    }

    fn slot(&mut self, side: FootSide) -> &mut Option<FootRecord> {
        match side {
            FootSide::Left => &mut self.left,
            FootSide::Right => &mut self.right,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &FootRecord> {
        self.left.iter().chain(self.right.iter())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExamState {
    Open,
    Completed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExamRecord {
    pub exam_id: String,
    pub patient: PatientRef,
    pub feet: Feet,
    pub state: ExamState,
    pub created_at: DateTime<Utc>,
    pub completed_at: Option<DateTime<Utc>>,
}

/// Reasons the workflow rejects an operation. The variant names double as
/// the error codes the HTTP layer returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Error)]
pub enum ExamError {
    #[error("exam is already completed")]
    ExamCompleted,
    #[error("checked tickbox cannot change after the photo has been uploaded")]
    CheckedLocked,
    #[error("visible ulcer count cannot change after the photo has been uploaded")]
    CountLocked,
    #[error("visible ulcer count must not be negative")]
    NegativeCount,
    #[error("foot details must be recorded before a photo is attached")]
    NoFootDetails,
    #[error("a photo has already been uploaded for this foot")]
    DuplicateUpload,
    #[error("no photo has been uploaded for this foot")]
    NoPhoto,
    #[error("an inference result is already recorded for this foot")]
    DuplicateResult,
    #[error("no inference result is available for this foot yet")]
    NoResult,
    #[error("the clinician confirmation is already recorded for this foot")]
    DuplicateConfirmation,
    #[error("no foot has been recorded")]
    NothingRecorded,
    #[error("a photographed foot is still waiting for its inference result")]
    PendingInference,
    #[error("a photographed foot is still waiting for clinician confirmation")]
    PendingConfirmation,
}

impl ExamError {
    pub fn code(self) -> &'static str {
        match self {
            ExamError::ExamCompleted => "ExamCompleted",
            ExamError::CheckedLocked => "CheckedLocked",
            ExamError::CountLocked => "CountLocked",
            ExamError::NegativeCount => "NegativeCount",
            ExamError::NoFootDetails => "NoFootDetails",
            ExamError::DuplicateUpload => "DuplicateUpload",
            ExamError::NoPhoto => "NoPhoto",
            ExamError::DuplicateResult => "DuplicateResult",
            ExamError::NoResult => "NoResult",
            ExamError::DuplicateConfirmation => "DuplicateConfirmation",
            ExamError::NothingRecorded => "NothingRecorded",
            ExamError::PendingInference => "PendingInference",
            ExamError::PendingConfirmation => "PendingConfirmation",
        }
    }
}

impl ExamRecord {
    pub fn new(exam_id: impl Into<String>, patient: PatientRef, created_at: DateTime<Utc>) -> Self {
        Self {
            exam_id: exam_id.into(),
            patient,
            feet: Feet::default(),
            state: ExamState::Open,
            created_at,
            completed_at: None,
        }
    }

    pub fn foot(&self, side: FootSide) -> Option<&FootRecord> {
        self.feet.get(side)
    }

    pub fn is_completed(&self) -> bool {
        self.state == ExamState::Completed
    }

    fn ensure_open(&self) -> Result<(), ExamError> {
        if self.is_completed() {
            Err(ExamError::ExamCompleted)
        } else {
            Ok(())
        }
    }

    fn with_foot(&self, side: FootSide, foot: FootRecord) -> ExamRecord {
        let mut next = self.clone();
        *next.feet.slot(side) = Some(foot);
        next
    }

    /// Creates or updates the clinician's entries for one foot.
    ///
    /// After the side's photo is attached, re-submitting the stored values is
    /// accepted unchanged and any change is rejected.
    pub fn record_foot_details(
        &self,
        side: FootSide,
        checked: bool,
        visible_ulcer_count: i64,
    ) -> Result<ExamRecord, ExamError> {
        self.ensure_open()?;
        if visible_ulcer_count < 0 {
            return Err(ExamError::NegativeCount);
        }
        let count = u32::try_from(visible_ulcer_count).map_err(|_| ExamError::NegativeCount)?;
        let foot = match self.foot(side) {
            None => FootRecord::new(side, checked, count),
            Some(existing) if existing.photo.is_some() => {
                if existing.checked != checked {
                    return Err(ExamError::CheckedLocked);
                }
                if existing.visible_ulcer_count != count {
                    return Err(ExamError::CountLocked);
                }
                existing.clone()
            }
            Some(existing) => FootRecord {
                checked,
                visible_ulcer_count: count,
                ..existing.clone()
            },
        };
        Ok(self.with_foot(side, foot))
    }

    pub fn attach_photo(&self, side: FootSide, meta: PhotographMeta) -> Result<ExamRecord, ExamError> {
        self.ensure_open()?;
        let existing = self.foot(side).ok_or(ExamError::NoFootDetails)?;
        if existing.photo.is_some() {
            return Err(ExamError::DuplicateUpload);
        }
        let foot = FootRecord {
            photo: Some(meta),
            ..existing.clone()
        };
        Ok(self.with_foot(side, foot))
    }

    pub fn record_result(&self, side: FootSide, result: InferenceResult) -> Result<ExamRecord, ExamError> {
        self.ensure_open()?;
        let existing = self
            .foot(side)
            .filter(|f| f.photo.is_some())
            .ok_or(ExamError::NoPhoto)?;
        if existing.result.is_some() {
            return Err(ExamError::DuplicateResult);
        }
        let foot = FootRecord {
            result: Some(result),
            ..existing.clone()
        };
        Ok(self.with_foot(side, foot))
    }

    pub fn record_confirmation(
        &self,
        side: FootSide,
        agrees: bool,
        recorded_at: DateTime<Utc>,
    ) -> Result<ExamRecord, ExamError> {
        self.ensure_open()?;
        let existing = self
            .foot(side)
            .filter(|f| f.result.is_some())
            .ok_or(ExamError::NoResult)?;
        if existing.confirmation.is_some() {
            return Err(ExamError::DuplicateConfirmation);
        }
        let foot = FootRecord {
            confirmation: Some(ConfirmationRecord { agrees, recorded_at }),
            ..existing.clone()
        };
        Ok(self.with_foot(side, foot))
    }

    pub fn complete_exam(&self, completed_at: DateTime<Utc>) -> Result<ExamRecord, ExamError> {
        self.ensure_open()?;
        if self.feet.iter().next().is_none() {
            return Err(ExamError::NothingRecorded);
        }
        // Inference is reported before confirmation when both feet are pending.
        if self.feet.iter().any(|f| f.photo.is_some() && f.result.is_none()) {
            return Err(ExamError::PendingInference);
        }
        if self.feet.iter().any(|f| !f.is_adjudicated()) {
            return Err(ExamError::PendingConfirmation);
        }
        let mut next = self.clone();
        next.state = ExamState::Completed;
        next.completed_at = Some(completed_at);
        Ok(next)
    }
}
