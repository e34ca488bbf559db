//! Durable record store.
//!
//! Patients, exams, photo metadata and jobs live in one SQLite database in
//! WAL mode. Exams are versioned and written with compare-and-swap. Photo
//! bytes go either into the database ([`BlobStrategy::Inline`]) or into a
//! directory tree keyed by photo id ([`BlobStrategy::ObjectStore`]).
//!
//! Several processes may open the same database; every write runs inside an
//! immediate transaction so the write lock is taken up front.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use chrono::{DateTime, TimeZone, Utc};
use parking_lot::Mutex;
use rusqlite::{params, Connection, OptionalExtension, Transaction, TransactionBehavior};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{BlobRef, BlobStrategy, ExamRecord, FootSide, PatientRef};

pub const DEFAULT_MAX_PHOTO_BYTES: u64 = 5 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StoreConfig {
    pub blob_strategy: BlobStrategy,
    /// Root of the object store. Required when `blob_strategy` is
    /// `object_store`; also used to read object-store blobs written earlier.
    pub object_store_root: Option<PathBuf>,
    pub max_photo_bytes: u64,
    /// SQLite database file.
    pub data_path: PathBuf,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            blob_strategy: BlobStrategy::Inline,
            object_store_root: None,
            max_photo_bytes: DEFAULT_MAX_PHOTO_BYTES,
            data_path: PathBuf::from("footscan.db"),
        }
    }
}

impl StoreConfig {
    /// Inline-blob config with the database at `dir/footscan.db`.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            data_path: dir.join("footscan.db"),
            ..Self::default()
        }
    }

    /// Object-store config rooted at `dir/blobs`, database at `dir/footscan.db`.
    pub fn object_store_in_dir(dir: &Path) -> Self {
        Self {
            blob_strategy: BlobStrategy::ObjectStore,
            object_store_root: Some(dir.join("blobs")),
            ..Self::in_dir(dir)
        }
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{0} not found")]
    NotFound(String),
    #[error("version conflict: expected {expected}, stored {actual}")]
    VersionConflict { expected: u64, actual: u64 },
    #[error("photo of {size} bytes exceeds the {max}-byte limit")]
    TooLarge { size: u64, max: u64 },
    #[error("photo payload is empty")]
    EmptyPhoto,
    #[error("photo id {0} is already in use")]
    DuplicatePhotoId(String),
    #[error("invalid photo id {0:?}")]
    InvalidPhotoId(String),
    #[error("invalid store config: {0}")]
    Config(String),
    #[error("storage failure: {0}")]
    StorageFailure(String),
}

impl From<rusqlite::Error> for StoreError {
    fn from(err: rusqlite::Error) -> Self {
        StoreError::StorageFailure(err.to_string())
    }
}

impl From<std::io::Error> for StoreError {
    fn from(err: std::io::Error) -> Self {
        StoreError::StorageFailure(err.to_string())
    }
}

impl From<serde_json::Error> for StoreError {
    fn from(err: serde_json::Error) -> Self {
        StoreError::StorageFailure(format!("corrupt record: {err}"))
    }
}

impl From<csv::Error> for StoreError {
    fn from(err: csv::Error) -> Self {
        StoreError::StorageFailure(err.to_string())
    }
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS patients (
    patient_id  TEXT PRIMARY KEY,
    created_at  INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS exams (
    exam_id     TEXT PRIMARY KEY,
    patient_id  TEXT NOT NULL,
    created_at  INTEGER NOT NULL,
    version     INTEGER NOT NULL,
    body        TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS photos (
    photo_id    TEXT PRIMARY KEY,
    strategy    TEXT NOT NULL,
    byte_size   INTEGER NOT NULL,
    data        BLOB,
    stored_at   INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS jobs (
    seq             INTEGER PRIMARY KEY AUTOINCREMENT,
    job_id          TEXT NOT NULL UNIQUE,
    exam_id         TEXT NOT NULL,
    side            TEXT NOT NULL,
    photo_id        TEXT NOT NULL,
    state           TEXT NOT NULL,
    attempts        INTEGER NOT NULL DEFAULT 0,
    worker_id       TEXT,
    enqueued_at     INTEGER NOT NULL,
    claimed_at      INTEGER,
    finished_at     INTEGER,
    result          TEXT,
    failure_reason  TEXT
);
CREATE INDEX IF NOT EXISTS jobs_by_state ON jobs(state, seq);
CREATE UNIQUE INDEX IF NOT EXISTS jobs_one_active_per_foot
    ON jobs(exam_id, side) WHERE state IN ('pending', 'in_progress');
";

pub struct Store {
    conn: Mutex<Connection>,
    config: StoreConfig,
    offline: AtomicBool,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store")
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl Store {
    pub fn open(config: StoreConfig) -> Result<Self> {
        if config.max_photo_bytes < 1 {
            return Err(StoreError::Config("max_photo_bytes must be at least 1".into()));
        }
        if config.blob_strategy == BlobStrategy::ObjectStore && config.object_store_root.is_none() {
            return Err(StoreError::Config(
                "object_store strategy needs object_store_root".into(),
            ));
        }
        if let Some(parent) = config.data_path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        if let Some(root) = &config.object_store_root {
            fs::create_dir_all(root)?;
        }
        let conn = Connection::open(&config.data_path)?;
        conn.busy_timeout(Duration::from_secs(10))?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        conn.pragma_update(None, "synchronous", "NORMAL")?;
        conn.execute_batch(SCHEMA)?;
        Ok(Self {
            conn: Mutex::new(conn),
            config,
            offline: AtomicBool::new(false),
        })
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    /// Fault injection: while offline every operation fails with
    /// [`StoreError::StorageFailure`].
    pub fn set_offline(&self, offline: bool) {
        self.offline.store(offline, Ordering::SeqCst);
    }

    fn ensure_online(&self) -> Result<()> {
        if self.offline.load(Ordering::SeqCst) {
            Err(StoreError::StorageFailure("store unreachable".into()))
        } else {
            Ok(())
        }
    }

    /// Cheap liveness probe.
    pub fn ping(&self) -> Result<()> {
        self.read(|conn| {
            conn.query_row("SELECT 1", [], |_| Ok(()))?;
            Ok(())
        })
    }

    pub(crate) fn read<T>(&self, f: impl FnOnce(&Connection) -> Result<T>) -> Result<T> {
        self.ensure_online()?;
        let conn = self.conn.lock();
        f(&conn)
    }

    /// Runs `f` in an immediate transaction, committing only on success.
    pub(crate) fn write<T, E>(&self, f: impl FnOnce(&Transaction<'_>) -> Result<T, E>) -> Result<T, E>
    where
        E: From<StoreError>,
    {
        self.ensure_online()?;
        let mut conn = self.conn.lock();
        let tx = conn
            .transaction_with_behavior(TransactionBehavior::Immediate)
            .map_err(StoreError::from)?;
        let out = f(&tx)?;
        tx.commit().map_err(StoreError::from)?;
        Ok(out)
    }

    pub fn add_patient(&self, patient: &PatientRef) -> Result<()> {
        self.write(|tx| {
            tx.execute(
                "INSERT OR IGNORE INTO patients (patient_id, created_at) VALUES (?1, ?2)",
                params![patient.patient_id, to_millis(Utc::now())],
            )?;
            Ok(())
        })
    }

    pub fn patient_exists(&self, patient_id: &str) -> Result<bool> {
        self.read(|conn| {
            let found = conn
                .query_row("SELECT 1 FROM patients WHERE patient_id = ?1", [patient_id], |_| Ok(()))
                .optional()?;
            Ok(found.is_some())
        })
    }

    /// Writes `exam` if the stored version equals `expected_version` (0 for a
    /// new exam) and returns the new version.
    pub fn save_exam(&self, exam: &ExamRecord, expected_version: u64) -> Result<u64> {
        self.write(|tx| save_exam_tx(tx, exam, expected_version))
    }

    pub fn load_exam(&self, exam_id: &str) -> Result<(ExamRecord, u64)> {
        self.read(|conn| {
            let row: Option<(String, i64)> = conn
                .query_row("SELECT body, version FROM exams WHERE exam_id = ?1", [exam_id], |r| {
                    Ok((r.get(0)?, r.get(1)?))
                })
                .optional()?;
            let (body, version) = row.ok_or_else(|| StoreError::NotFound(format!("exam {exam_id}")))?;
            Ok((serde_json::from_str(&body)?, version as u64))
        })
    }

    /// Every exam, oldest first.
    pub fn list_exams(&self) -> Result<Vec<(ExamRecord, u64)>> {
        self.read(|conn| {
            let mut stmt = conn.prepare("SELECT body, version FROM exams ORDER BY created_at, exam_id")?;
            let rows = stmt.query_map([], |r| Ok((r.get::<_, String>(0)?, r.get::<_, i64>(1)?)))?;
            rows.map(|row| {
                let (body, version) = row?;
                Ok((serde_json::from_str(&body)?, version as u64))
            })
            .collect()
        })
    }

    /// Stores photo bytes under `photo_id` using the configured strategy.
    pub fn store_photo(&self, bytes: &[u8], photo_id: &str) -> Result<BlobRef> {
        let staged = self.stage_photo(bytes, photo_id)?;
        let outcome = self.write(|tx| staged.insert(tx));
        if outcome.is_err() {
            staged.discard();
        }
        outcome
    }

    /// Validates the payload and, for the object store, writes the file.
    /// The photo row is inserted later by [`StagedPhoto::insert`] inside a
    /// caller-owned transaction.
    pub(crate) fn stage_photo<'a>(&self, bytes: &'a [u8], photo_id: &str) -> Result<StagedPhoto<'a>> {
        self.ensure_online()?;
        let size = bytes.len() as u64;
        if size == 0 {
            return Err(StoreError::EmptyPhoto);
        }
        if size > self.config.max_photo_bytes {
            return Err(StoreError::TooLarge {
                size,
                max: self.config.max_photo_bytes,
            });
        }
        validate_photo_id(photo_id)?;
        let blob = BlobRef {
            strategy: self.config.blob_strategy,
            key: photo_id.to_string(),
        };
        let file = match blob.strategy {
            BlobStrategy::Inline => None,
            BlobStrategy::ObjectStore => {
                let path = self.object_path(&blob.key)?;
                write_new(&path, bytes)?;
                Some(path)
            }
        };
        Ok(StagedPhoto { blob, bytes, file })
    }

    pub fn fetch_photo(&self, blob: &BlobRef) -> Result<Vec<u8>> {
        self.ensure_online()?;
        let not_found = || StoreError::NotFound(format!("photo {}", blob.key));
        match blob.strategy {
            BlobStrategy::Inline => self.read(|conn| {
                let data: Option<Option<Vec<u8>>> = conn
                    .query_row(
                        "SELECT data FROM photos WHERE photo_id = ?1 AND strategy = 'inline'",
                        [&blob.key],
                        |r| r.get(0),
                    )
                    .optional()?;
                data.flatten().ok_or_else(not_found)
            }),
            BlobStrategy::ObjectStore => {
                validate_photo_id(&blob.key).map_err(|_| not_found())?;
                let path = self.object_path(&blob.key)?;
                match fs::read(&path) {
                    Ok(bytes) => Ok(bytes),
                    Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(not_found()),
                    Err(e) => Err(e.into()),
                }
            }
        }
    }

    fn object_path(&self, key: &str) -> Result<PathBuf> {
        let root = self
            .config
            .object_store_root
            .as_ref()
            .ok_or_else(|| StoreError::Config("no object_store_root configured".into()))?;
        Ok(object_path(root, key))
    }

    /// Writes every photographed foot's photo to `destination` as
    /// `<photo_id>.png` plus a `manifest.csv`, returning the photo count.
    pub fn export_dataset(&self, destination: &Path) -> Result<usize> {
        fs::create_dir_all(destination)?;
        let mut manifest = csv::Writer::from_path(destination.join("manifest.csv"))?;
        manifest.write_record(MANIFEST_HEADER)?;
        let mut count = 0;
        for (exam, _) in self.list_exams()? {
            for foot in exam.feet.iter() {
                let Some(photo) = &foot.photo else { continue };
                let bytes = self.fetch_photo(&photo.blob)?;
                fs::write(destination.join(format!("{}.png", photo.photo_id)), &bytes)?;
                let detection_count = foot
                    .result
                    .as_ref()
                    .map(|r| r.detections.len().to_string())
                    .unwrap_or_default();
                let agrees = foot.confirmation.map(|c| c.agrees.to_string()).unwrap_or_default();
                manifest.write_record([
                    photo.photo_id.as_str(),
                    exam.exam_id.as_str(),
                    foot.side.as_str(),
                    &foot.visible_ulcer_count.to_string(),
                    &detection_count,
                    &agrees,
                ])?;
                count += 1;
            }
        }
        manifest.flush()?;
        Ok(count)
    }
}

pub const MANIFEST_HEADER: [&str; 6] = [
    "photo_id",
    "exam_id",
    "side",
    "visible_ulcer_count",
    "detection_count",
    "agrees",
];

/// Photo bytes validated (and for the object store, already on disk) but not
/// yet recorded in the database.
pub(crate) struct StagedPhoto<'a> {
    blob: BlobRef,
    bytes: &'a [u8],
    file: Option<PathBuf>,
}

impl StagedPhoto<'_> {
    pub(crate) fn insert(&self, tx: &Transaction<'_>) -> Result<BlobRef> {
        let inline = match self.blob.strategy {
            BlobStrategy::Inline => Some(self.bytes),
            BlobStrategy::ObjectStore => None,
        };
        let inserted = tx.execute(
            "INSERT OR IGNORE INTO photos (photo_id, strategy, byte_size, data, stored_at)
             VALUES (?1, ?2, ?3, ?4, ?5)",
            params![
                self.blob.key,
                self.blob.strategy.as_str(),
                self.bytes.len() as i64,
                inline,
                to_millis(Utc::now())
            ],
        )?;
        if inserted == 0 {
            return Err(StoreError::DuplicatePhotoId(self.blob.key.clone()));
        }
        Ok(self.blob.clone())
    }

    /// Removes the object-store file after a failed transaction.
    pub(crate) fn discard(&self) {
        if let Some(path) = &self.file {
            if let Err(e) = fs::remove_file(path) {
                log::warn!("could not remove orphaned blob {}: {e}", path.display());
            }
        }
    }
}

pub(crate) fn save_exam_tx(tx: &Transaction<'_>, exam: &ExamRecord, expected_version: u64) -> Result<u64> {
    let stored: Option<i64> = tx
        .query_row("SELECT version FROM exams WHERE exam_id = ?1", [&exam.exam_id], |r| {
            r.get(0)
        })
        .optional()?;
    let actual = stored.map_or(0, |v| v as u64);
    if actual != expected_version {
        return Err(StoreError::VersionConflict {
            expected: expected_version,
            actual,
        });
    }
    let body = serde_json::to_string(exam)?;
    let next = expected_version + 1;
    if stored.is_none() {
        tx.execute(
            "INSERT INTO exams (exam_id, patient_id, created_at, version, body) VALUES (?1, ?2, ?3, ?4, ?5)",
            params![
                exam.exam_id,
                exam.patient.patient_id,
                to_millis(exam.created_at),
                next as i64,
                body
            ],
        )?;
    } else {
        tx.execute(
            "UPDATE exams SET version = ?1, body = ?2 WHERE exam_id = ?3 AND version = ?4",
            params![next as i64, body, exam.exam_id, expected_version as i64],
        )?;
    }
    Ok(next)
}

pub(crate) fn photo_exists(conn: &Connection, photo_id: &str) -> Result<bool> {
    Ok(conn
        .query_row("SELECT 1 FROM photos WHERE photo_id = ?1", [photo_id], |_| Ok(()))
        .optional()?
        .is_some())
}

/// `<root>/<first two chars of key>/<key>.bin`
pub fn object_path(root: &Path, key: &str) -> PathBuf {
    root.join(&key[..2]).join(format!("{key}.bin"))
}

fn validate_photo_id(photo_id: &str) -> Result<()> {
    let ok = photo_id.len() >= 2
        && photo_id.len() <= 128
        && photo_id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_');
    if ok {
        Ok(())
    } else {
        Err(StoreError::InvalidPhotoId(photo_id.to_string()))
    }
}

/// Writes `bytes` to `path` via a temporary file and a hard link, so the
/// final name appears fully written and an existing file is never replaced.
fn write_new(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().expect("object path has a parent");
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(".{}.tmp", new_id()));
    let mut file = fs::File::create(&tmp)?;
    let written = file.write_all(bytes).and_then(|_| file.sync_all());
    drop(file);
    let linked = written.and_then(|_| fs::hard_link(&tmp, path));
    let _ = fs::remove_file(&tmp);
    match linked {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(StoreError::DuplicatePhotoId(
            path.file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string(),
        )),
        Err(e) => Err(e.into()),
    }
}

/// A fresh 32-hex-digit identifier.
pub fn new_id() -> String {
    uuid::Uuid::new_v4().simple().to_string()
}

pub(crate) fn to_millis(t: DateTime<Utc>) -> i64 {
    t.timestamp_millis()
}

pub(crate) fn from_millis(ms: i64) -> DateTime<Utc> {
    Utc.timestamp_millis_opt(ms).single().unwrap_or_default()
}

pub(crate) fn side_from_sql(s: &str) -> rusqlite::Result<FootSide> {
    s.parse().map_err(|e: crate::domain::InvalidSide| {
        rusqlite::Error::FromSqlConversionFailure(0, rusqlite::types::Type::Text, Box::new(e))
    })
}
