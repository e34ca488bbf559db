use footscan_testkit::http_diff::run_differential;

#[test]
fn http_and_direct_replay_agree() {
    let report = run_differential(120, 16, 7).unwrap();
    assert!(report.is_clean(), "{:#?}", report.mismatches);
    assert_eq!(report.sequences, 120);
    assert!(report.completed_exams > 0, "{report:?}");
    for code in [
        "ok",
        "NegativeCount",
        "NoFootDetails",
        "DuplicateUpload",
        "CheckedLocked",
        "NoResult",
        "PendingInference",
        "PendingConfirmation",
        "CountLocked",
        "NothingRecorded",
        "ExamCompleted",
        "BadImage",
        "InvalidSide",
        "BadRequest",
    ] {
        assert!(
            report.outcomes.contains_key(code),
            "{code} never seen: {:?}",
            report.outcomes
        );
    }
}
