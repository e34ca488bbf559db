use std::collections::BTreeMap;

use chrono::{DateTime, TimeZone, Utc};
use footscan_core::detector::{BoundingBox, Detection};
use footscan_core::domain::{
    BlobRef, BlobStrategy, ExamError, ExamRecord, FootSide, InferenceResult, PatientRef, PhotographMeta,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Op {
    Details { side: FootSide, checked: bool, count: i64 },
    Photo(FootSide),
    Result(FootSide),
    Confirm(FootSide),
    Complete,
}

/// How far a foot has progressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Details,
    Photo,
    Result,
    Confirmed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FootModel {
    pub stage: Stage,
    pub checked: bool,
    pub count: i64,
}

/// Abstract model of one exam; predicts the outcome of every operation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExamModel {
    pub left: Option<FootModel>,
    pub right: Option<FootModel>,
    pub completed: bool,
}

impl ExamModel {
    fn foot(&self, side: FootSide) -> Option<FootModel> {
        match side {
            FootSide::Left => self.left,
            FootSide::Right => self.right,
        }
    }

    fn set(&mut self, side: FootSide, foot: FootModel) {
        match side {
            FootSide::Left => self.left = Some(foot),
            FootSide::Right => self.right = Some(foot),
        }
    }

    /// Applies `op`, returning the predicted error code on rejection. A
    /// rejected op leaves the model unchanged.
    pub fn apply(&mut self, op: Op) -> Result<(), &'static str> {
        if self.completed {
            return Err("ExamCompleted");
        }
        match op {
            Op::Details { side, checked, count } => {
                if count < 0 {
                    return Err("NegativeCount");
                }
                match self.foot(side) {
                    Some(f) if f.stage >= Stage::Photo => {
                        if f.checked != checked {
                            return Err("CheckedLocked");
                        }
                        if f.count != count {
                            return Err("CountLocked");
                        }
                    }
                    _ => self.set(
                        side,
                        FootModel {
                            stage: Stage::Details,
                            checked,
                            count,
                        },
                    ),
                }
            }
            Op::Photo(side) => {
                let f = self.foot(side).ok_or("NoFootDetails")?;
                if f.stage >= Stage::Photo {
                    return Err("DuplicateUpload");
                }
                self.set(
                    side,
                    FootModel {
                        stage: Stage::Photo,
                        ..f
                    },
                );
            }
            Op::Result(side) => {
                let f = self.foot(side).filter(|f| f.stage >= Stage::Photo).ok_or("NoPhoto")?;
                if f.stage >= Stage::Result {
                    return Err("DuplicateResult");
                }
                self.set(
                    side,
                    FootModel {
                        stage: Stage::Result,
                        ..f
                    },
                );
            }
            Op::Confirm(side) => {
                let f = self.foot(side).filter(|f| f.stage >= Stage::Result).ok_or("NoResult")?;
                if f.stage >= Stage::Confirmed {
                    return Err("DuplicateConfirmation");
                }
                self.set(
                    side,
                    FootModel {
                        stage: Stage::Confirmed,
                        ..f
                    },
                );
            }
            Op::Complete => {
                let feet: Vec<FootModel> = self.left.into_iter().chain(self.right).collect();
                if feet.is_empty() {
                    return Err("NothingRecorded");
                }
                if feet.iter().any(|f| f.stage == Stage::Photo) {
                    return Err("PendingInference");
                }
                if feet.iter().any(|f| f.stage == Stage::Result) {
                    return Err("PendingConfirmation");
                }
                self.completed = true;
            }
        }
        Ok(())
    }

    /// Abstracts a real record into the model's vocabulary.
    pub fn abstract_record(exam: &ExamRecord) -> ExamModel {
        let foot = |side| {
            exam.foot(side).map(|f| FootModel {
                stage: if f.confirmation.is_some() {
                    Stage::Confirmed
                } else if f.result.is_some() {
                    Stage::Result
                } else if f.photo.is_some() {
                    Stage::Photo
                } else {
                    Stage::Details
                },
                checked: f.checked,
                count: f.visible_ulcer_count as i64,
            })
        };
        ExamModel {
            left: foot(FootSide::Left),
            right: foot(FootSide::Right),
            completed: exam.is_completed(),
        }
    }
}

pub fn fixed_time(step: usize) -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap() + chrono::Duration::seconds(step as i64)
}

pub fn fresh_exam() -> ExamRecord {
    ExamRecord::new("exam", PatientRef::new("P001").unwrap(), fixed_time(0))
}

/// Runs `op` against a real record. `step` makes generated ids unique.
pub fn apply_to_record(exam: &ExamRecord, op: Op, step: usize) -> Result<ExamRecord, ExamError> {
    let at = fixed_time(step + 1);
    match op {
        Op::Details { side, checked, count } => exam.record_foot_details(side, checked, count),
        Op::Photo(side) => {
            let id = format!("photo{step:03}");
            exam.attach_photo(
                side,
                PhotographMeta {
                    photo_id: id.clone(),
                    blob: BlobRef {
                        strategy: BlobStrategy::Inline,
                        key: id,
                    },
                    width: 100,
                    height: 100,
                    byte_size: 61_440,
                    uploaded_at: at,
                },
            )
        }
        Op::Result(side) => exam.record_result(
            side,
            InferenceResult::new(
                format!("job{step:03}"),
                vec![Detection::new(BoundingBox::new(20, 30, 20, 20), 1.0)],
                at,
                "enumeration",
            ),
        ),
        Op::Confirm(side) => exam.record_confirmation(side, step.is_multiple_of(2), at),
        Op::Complete => exam.complete_exam(at),
    }
}

/// Single-foot alphabet: details variants (including a negative count and a
/// count change), photo, result, confirm, complete.
pub fn single_foot_alphabet(side: FootSide) -> Vec<Op> {
    vec![
        Op::Details {
            side,
            checked: true,
            count: 0,
        },
        Op::Details {
            side,
            checked: true,
            count: 2,
        },
        Op::Details {
            side,
            checked: false,
            count: 0,
        },
        Op::Details {
            side,
            checked: true,
            count: -1,
        },
        Op::Photo(side),
        Op::Result(side),
        Op::Confirm(side),
        Op::Complete,
    ]
}

/// Two-foot alphabet used to check that the rules hold independently per side.
pub fn two_foot_alphabet() -> Vec<Op> {
    let mut ops = Vec::new();
    for side in FootSide::ALL {
        ops.push(Op::Details {
            side,
            checked: true,
            count: 1,
        });
        ops.push(Op::Details {
            side,
            checked: false,
            count: 1,
        });
        ops.push(Op::Photo(side));
        ops.push(Op::Result(side));
        ops.push(Op::Confirm(side));
    }
    ops.push(Op::Complete);
    ops
}

#[derive(Debug, Default)]
pub struct ExplorationReport {
    pub sequences: u64,
    pub steps: u64,
    pub accepted: u64,
    pub rejected_by_code: BTreeMap<&'static str, u64>,
    /// Steps where the record disagreed with the model.
    pub mismatches: Vec<String>,
    /// Steps that broke a photo or tickbox rule.
    pub rule_violations: Vec<String>,
}

impl ExplorationReport {
    pub fn is_clean(&self) -> bool {
        self.mismatches.is_empty() && self.rule_violations.is_empty()
    }
}

/// Depth-first enumeration of every sequence over `alphabet` of length up to
/// `max_len`, checking each step against [`ExamModel`] and the photo/tickbox
/// rules.
pub fn explore(alphabet: &[Op], max_len: usize) -> ExplorationReport {
    let mut report = ExplorationReport::default();
    let mut path = Vec::with_capacity(max_len);
    walk(
        alphabet,
        max_len,
        &fresh_exam(),
        &ExamModel::default(),
        &mut path,
        &mut report,
    );
    report
}

fn walk(
    alphabet: &[Op],
    remaining: usize,
    exam: &ExamRecord,
    model: &ExamModel,
    path: &mut Vec<Op>,
    report: &mut ExplorationReport,
) {
    report.sequences += 1;
    if remaining == 0 {
        return;
    }
    for &op in alphabet {
        report.steps += 1;
        let snapshot = exam.clone();
        let mut next_model = model.clone();
        let predicted = next_model.apply(op);
        let actual = apply_to_record(exam, op, path.len());
        path.push(op);

        if exam != &snapshot {
            report.mismatches.push(format!("{path:?}: input record mutated"));
        }
        let next_exam = match (&predicted, actual) {
            (Ok(()), Ok(next)) => {
                report.accepted += 1;
                if ExamModel::abstract_record(&next) != next_model {
                    report.mismatches.push(format!("{path:?}: state diverged from model"));
                }
                check_rules(exam, &next, op, path, report);
                next
            }
            (Err(code), Err(err)) => {
                *report.rejected_by_code.entry(code).or_default() += 1;
                if *code != err.code() {
                    report
                        .mismatches
                        .push(format!("{path:?}: expected {code}, got {}", err.code()));
                }
                if let Op::Photo(side) = op {
                    if exam.foot(side).is_some_and(|f| f.photo.is_some())
                        && !exam.is_completed()
                        && err != ExamError::DuplicateUpload
                    {
                        report
                            .rule_violations
                            .push(format!("{path:?}: retake not reported as duplicate"));
                    }
                }
                snapshot
            }
            (Ok(()), Err(err)) => {
                report
                    .mismatches
                    .push(format!("{path:?}: expected success, got {}", err.code()));
                snapshot
            }
            (Err(code), Ok(next)) => {
                report
                    .mismatches
                    .push(format!("{path:?}: expected {code}, got success"));
                check_rules(exam, &next, op, path, report);
                next
            }
        };
        let next_model = if predicted.is_ok() { next_model } else { model.clone() };
        walk(alphabet, remaining - 1, &next_exam, &next_model, path, report);
        path.pop();
    }
}

/// The photo and tickbox rules, checked on every accepted transition for
/// both sides.
fn check_rules(before: &ExamRecord, after: &ExamRecord, op: Op, path: &[Op], report: &mut ExplorationReport) {
    for side in FootSide::ALL {
        let (Some(prev), next) = (before.foot(side), after.foot(side)) else {
            continue;
        };
        let Some(photo) = &prev.photo else { continue };
        let Some(next) = next else {
            report
                .rule_violations
                .push(format!("{path:?}: {side} foot record vanished"));
            continue;
        };
        if next.photo.as_ref() != Some(photo) {
            report
                .rule_violations
                .push(format!("{path:?}: {side} photo replaced after upload"));
        }
        if next.checked != prev.checked {
            report
                .rule_violations
                .push(format!("{path:?}: {side} checked changed after upload"));
        }
        if op == Op::Photo(side) {
            report
                .rule_violations
                .push(format!("{path:?}: second {side} upload accepted"));
        }
    }
}
