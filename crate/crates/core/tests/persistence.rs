use std::collections::HashSet;
use std::io::{BufRead, BufReader};
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::thread;

use chrono::{TimeZone, Utc};
use footscan_core::domain::{BlobStrategy, ExamRecord, FootSide, PatientRef};
use footscan_core::queue::{JobQueue, QueueConfig};
use footscan_core::service::ExamService;
use footscan_core::store::{Store, StoreConfig, StoreError};
use footscan_core::synthetic::demo_photo_png;
use proptest::prelude::*;
use tempfile::TempDir;

fn both_stores(dir: &TempDir) -> [Store; 2] {
    let inline = Store::open(StoreConfig::in_dir(&dir.path().join("inline"))).unwrap();
    let objects = Store::open(StoreConfig::object_store_in_dir(&dir.path().join("objects"))).unwrap();
    [inline, objects]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn blobs_round_trip_under_both_strategies(bytes in proptest::collection::vec(any::<u8>(), 1..20_000)) {
        let dir = TempDir::new().unwrap();
        for store in both_stores(&dir) {
            let id = footscan_core::store::new_id();
            let blob = store.store_photo(&bytes, &id).unwrap();
            prop_assert_eq!(store.fetch_photo(&blob).unwrap(), bytes.clone());
        }
    }
}

#[test]
fn average_sized_photo_round_trips_identically_across_strategies() {
    let dir = TempDir::new().unwrap();
    let payload: Vec<u8> = (0..61_440u32)
        .map(|i| (i.wrapping_mul(2_654_435_761) >> 24) as u8)
        .collect();
    let [inline, objects] = both_stores(&dir);
    let a = inline.store_photo(&payload, "avg0001").unwrap();
    let b = objects.store_photo(&payload, "avg0001").unwrap();
    assert_eq!(a.strategy, BlobStrategy::Inline);
    assert_eq!(b.strategy, BlobStrategy::ObjectStore);
    let fa = inline.fetch_photo(&a).unwrap();
    let fb = objects.fetch_photo(&b).unwrap();
    assert_eq!(fa, payload);
    assert_eq!(fa, fb);
}

#[test]
fn max_size_boundary() {
    let dir = TempDir::new().unwrap();
    let store = Store::open(StoreConfig::in_dir(dir.path())).unwrap();
    let max = store.config().max_photo_bytes as usize;
    assert_eq!(max, 5_242_880);
    let at_limit = vec![1u8; max];
    let blob = store.store_photo(&at_limit, "big0001").unwrap();
    assert_eq!(store.fetch_photo(&blob).unwrap().len(), max);
    assert!(matches!(
        store.store_photo(&vec![1u8; max + 1], "big0002"),
        Err(StoreError::TooLarge { .. })
    ));
}

/// Two writers on separate connections bump the left-foot count; every
/// increment must land exactly once.
#[test]
fn racing_writers_lose_no_updates() {
    let dir = TempDir::new().unwrap();
    let config = StoreConfig::in_dir(dir.path());
    let seed = Store::open(config.clone()).unwrap();
    let exam = ExamRecord::new("race", PatientRef::new("P1").unwrap(), Utc::now())
        .record_foot_details(FootSide::Left, true, 0)
        .unwrap();
    seed.save_exam(&exam, 0).unwrap();

    const PER_WRITER: usize = 150;
    let handles: Vec<_> = (0..2)
        .map(|_| {
            let config = config.clone();
            thread::spawn(move || {
                let store = Store::open(config).unwrap();
                let mut won_versions = Vec::new();
                let mut conflicts = 0;
                while won_versions.len() < PER_WRITER {
                    let (exam, version) = store.load_exam("race").unwrap();
                    let count = exam.foot(FootSide::Left).unwrap().visible_ulcer_count as i64;
                    let next = exam.record_foot_details(FootSide::Left, true, count + 1).unwrap();
                    match store.save_exam(&next, version) {
                        Ok(v) => won_versions.push(v),
                        Err(StoreError::VersionConflict { .. }) => conflicts += 1,
                        Err(e) => panic!("{e}"),
                    }
                }
                (won_versions, conflicts)
            })
        })
        .collect();

    let mut all_versions = HashSet::new();
    for h in handles {
        let (versions, _conflicts) = h.join().unwrap();
        for v in versions {
            assert!(all_versions.insert(v), "version {v} won twice");
        }
    }
    let (exam, version) = seed.load_exam("race").unwrap();
    assert_eq!(version as usize, 1 + 2 * PER_WRITER);
    assert_eq!(
        exam.foot(FootSide::Left).unwrap().visible_ulcer_count as usize,
        2 * PER_WRITER
    );
}

const CRASH_ENV: &str = "FOOTSCAN_CRASH_DIR";

fn crash_record(i: u64) -> ExamRecord {
    let at = Utc.with_ymd_and_hms(2024, 6, 1, 0, 0, 0).unwrap() + chrono::Duration::seconds(i as i64);
    ExamRecord::new(format!("crash-{i}"), PatientRef::new(format!("P{i}")).unwrap(), at)
        .record_foot_details(FootSide::Right, i.is_multiple_of(2), (i % 5) as i64)
        .unwrap()
}

fn crash_blob(i: u64) -> Vec<u8> {
    (0..(1 + i % 97) as usize).map(|k| (k as u64 ^ i) as u8).collect()
}

/// Child half of `killed_writer_loses_nothing`; a no-op unless re-executed.
#[test]
fn crash_child_writer() {
    let Ok(dir) = std::env::var(CRASH_ENV) else { return };
    let config = StoreConfig::object_store_in_dir(std::path::Path::new(&dir));
    let inline = Store::open(StoreConfig {
        blob_strategy: BlobStrategy::Inline,
        ..config.clone()
    })
    .unwrap();
    let objects = Store::open(config).unwrap();
    for i in 0..1_000_000u64 {
        inline.save_exam(&crash_record(i), 0).unwrap();
        let store = if i % 2 == 0 { &inline } else { &objects };
        store.store_photo(&crash_blob(i), &format!("blob{i:06}")).unwrap();
        println!("committed {i}");
    }
}

#[test]
fn killed_writer_loses_nothing() {
    let dir = TempDir::new().unwrap();
    let mut child = Command::new(std::env::current_exe().unwrap())
        .args(["crash_child_writer", "--exact", "--nocapture", "--test-threads=1"])
        .env(CRASH_ENV, dir.path())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();

    let mut committed = Vec::new();
    let reader = BufReader::new(child.stdout.take().unwrap());
    for line in reader.lines() {
        let line = line.unwrap();
        if let Some(i) = line.strip_prefix("committed ") {
            committed.push(i.parse::<u64>().unwrap());
            if committed.len() == 200 {
                child.kill().unwrap();
                break;
            }
        }
    }
    child.wait().unwrap();
    assert_eq!(committed.len(), 200);

    let config = StoreConfig::object_store_in_dir(dir.path());
    let store = Store::open(config).unwrap();
    for &i in &committed {
        let (exam, version) = store.load_exam(&format!("crash-{i}")).unwrap();
        assert_eq!(exam, crash_record(i));
        assert_eq!(version, 1);
        let strategy = if i % 2 == 0 {
            BlobStrategy::Inline
        } else {
            BlobStrategy::ObjectStore
        };
        let blob = footscan_core::domain::BlobRef {
            strategy,
            key: format!("blob{i:06}"),
        };
        assert_eq!(store.fetch_photo(&blob).unwrap(), crash_blob(i));
    }
}

#[test]
fn export_writes_photos_and_manifest() {
    let dir = TempDir::new().unwrap();
    let store = Arc::new(Store::open(StoreConfig::object_store_in_dir(dir.path())).unwrap());
    let svc = ExamService::new(JobQueue::new(store.clone(), QueueConfig::default()));
    svc.register_patient("P001").unwrap();
    let png = demo_photo_png().unwrap();

    let first = svc.create_exam("P001").unwrap();
    let second = svc.create_exam("P001").unwrap();
    let mut photo_ids = Vec::new();
    for (exam, side, count) in [
        (&first, FootSide::Left, 1),
        (&first, FootSide::Right, 0),
        (&second, FootSide::Left, 3),
    ] {
        svc.record_foot_details(&exam.exam_id, side, true, count).unwrap();
        let (meta, _) = svc.upload_photo(&exam.exam_id, side, &png).unwrap();
        photo_ids.push(meta.photo_id);
    }
    // a foot without a photo is not exported
    svc.record_foot_details(&second.exam_id, FootSide::Right, false, 0)
        .unwrap();

    let dest = dir.path().join("export");
    assert_eq!(store.export_dataset(&dest).unwrap(), 3);
    for id in &photo_ids {
        let exported = std::fs::read(dest.join(format!("{id}.png"))).unwrap();
        assert_eq!(crc32(&exported), crc32(&png));
    }

    let mut reader = csv::Reader::from_path(dest.join("manifest.csv")).unwrap();
    assert_eq!(
        reader.headers().unwrap().iter().collect::<Vec<_>>(),
        [
            "photo_id",
            "exam_id",
            "side",
            "visible_ulcer_count",
            "detection_count",
            "agrees"
        ]
    );
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3);
    let ids: HashSet<&str> = rows.iter().map(|r| &r[0]).collect();
    assert_eq!(ids, photo_ids.iter().map(String::as_str).collect());
    let counts: Vec<&str> = rows.iter().map(|r| &r[3]).collect();
    assert!(counts.contains(&"3"));
}

fn crc32(bytes: &[u8]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(bytes);
    h.finalize()
}
