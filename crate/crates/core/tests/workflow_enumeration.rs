use footscan_core::domain::FootSide;
use footscan_testkit::workflow::{explore, single_foot_alphabet, two_foot_alphabet};

#[test]
fn every_single_foot_sequence_matches_the_model() {
    for side in FootSide::ALL {
        let report = explore(&single_foot_alphabet(side), 6);
        // 8 ops, lengths 0..=6
        assert_eq!(report.sequences, (0..=6).map(|k| 8u64.pow(k)).sum::<u64>());
        assert!(
            report.is_clean(),
            "{:?} {:?}",
            &report.mismatches[..report.mismatches.len().min(5)],
            &report.rule_violations[..report.rule_violations.len().min(5)]
        );
        for code in [
            "ExamCompleted",
            "CheckedLocked",
            "CountLocked",
            "NegativeCount",
            "NoFootDetails",
            "DuplicateUpload",
            "NoPhoto",
            "DuplicateResult",
            "NoResult",
            "DuplicateConfirmation",
            "NothingRecorded",
            "PendingInference",
            "PendingConfirmation",
        ] {
            assert!(
                report.rejected_by_code.get(code).copied().unwrap_or(0) > 0,
                "{code} never exercised"
            );
        }
    }
}

#[test]
fn rules_hold_independently_per_side() {
    let report = explore(&two_foot_alphabet(), 5);
    assert!(
        report.is_clean(),
        "{:?}",
        report.mismatches.first().or(report.rule_violations.first())
    );
    assert!(report.accepted > 0);
}
