use std::sync::Arc;
use std::time::Duration;

use footscan_client::{Client, ClientError};
use footscan_core::detector::{Detection, DetectorConfig, RednessDetector};
use footscan_core::domain::FootSide;
use footscan_core::queue::{JobQueue, QueueConfig};
use footscan_core::service::ExamService;
use footscan_core::store::{Store, StoreConfig};
use footscan_core::synthetic::{demo_photo_png, DEMO_LESION};
use footscan_core::worker::{WorkerConfig, WorkerPool};
use footscan_server::{AppState, ServerHandle, VersionPolicy};
use tempfile::TempDir;

const TOKEN: &str = "client-test";

struct Env {
    _dir: TempDir,
    service: ExamService,
    server: ServerHandle,
}

fn start() -> Env {
    let dir = TempDir::new().unwrap();
    let store = Arc::new(Store::open(StoreConfig::object_store_in_dir(dir.path())).unwrap());
    let service = ExamService::new(JobQueue::new(store, QueueConfig::default()));
    service.register_patient("P001").unwrap();
    let policy = VersionPolicy::new("1.0.0", "1.3.0").unwrap();
    let server = ServerHandle::start(
        "127.0.0.1:0".parse().unwrap(),
        AppState::new(service.clone(), TOKEN, policy),
    )
    .unwrap();
    Env {
        _dir: dir,
        service,
        server,
    }
}

impl Env {
    fn client(&self) -> Client {
        Client::new(&self.server.base_url(), TOKEN).unwrap()
    }

    fn workers(&self) -> WorkerPool {
        let detector = Arc::new(RednessDetector::new(DetectorConfig::default()).unwrap());
        let config = WorkerConfig {
            poll_interval: Duration::from_millis(20),
            ..WorkerConfig::default()
        };
        WorkerPool::spawn(1, "client-test", self.service.queue().clone(), detector, config)
    }
}

#[test]
fn check_server_gates_on_version() {
    let env = start();
    let client = env.client();
    let check = client.check_server("1.0.0").unwrap();
    assert!(check.compatible);
    assert!(check.status.store_ok);
    assert_eq!(check.status.queue.total(), 0);

    match client.check_server("0.9.9") {
        Err(ClientError::IncompatibleVersion { min_supported, .. }) => assert_eq!(min_supported, "1.0.0"),
        other => panic!("{other:?}"),
    }
    assert_eq!(
        client.check_server("nope").unwrap_err().code(),
        Some("MalformedVersion")
    );
}

#[test]
fn unreachable_server_is_connection_failed() {
    let port = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let client = Client::new(&format!("http://127.0.0.1:{port}"), TOKEN).unwrap();
    assert!(matches!(
        client.check_server("1.0.0"),
        Err(ClientError::ConnectionFailed(_))
    ));
}

#[test]
fn full_flow_through_the_client() {
    let env = start();
    let client = env.client();
    let pool = env.workers();
    let png = demo_photo_png().unwrap();

    let exam = client.create_exam("P001").unwrap();
    let left = client.submit_foot_exam(&exam, FootSide::Left, true, 1, &png).unwrap();
    let right = client.submit_foot_exam(&exam, FootSide::Right, false, 0, &png).unwrap();
    for (side, job) in [(FootSide::Left, &left), (FootSide::Right, &right)] {
        let result = client
            .await_result(job, Duration::from_secs(20), Duration::from_millis(25))
            .unwrap();
        assert_eq!(&result.job_id, job);
        assert_eq!(result.detections, vec![Detection::new(DEMO_LESION, 1.0)]);
        assert_eq!(result.detector_id, RednessDetector::ID);
        client.confirm(&exam, side, true).unwrap();
    }
    let done = client.complete_exam(&exam).unwrap();
    assert!(done.is_completed());
    assert_eq!(client.exam(&exam).unwrap(), done);
    pool.shutdown();
}

#[test]
fn server_rules_surface_as_typed_codes() {
    let env = start();
    let client = env.client();
    let png = demo_photo_png().unwrap();
    let exam = client.create_exam("P001").unwrap();
    client.submit_foot_exam(&exam, FootSide::Left, true, 0, &png).unwrap();

    let again = client
        .submit_foot_exam(&exam, FootSide::Left, true, 0, &png)
        .unwrap_err();
    assert_eq!(again.code(), Some("DuplicateUpload"));
    assert!(matches!(again, ClientError::Server { status: 409, .. }));

    let huge = vec![0u8; 6 * 1024 * 1024];
    let err = client
        .submit_foot_exam(&exam, FootSide::Right, true, 0, &huge)
        .unwrap_err();
    assert_eq!(err.code(), Some("TooLarge"));

    let ghost = client.create_exam("ghost").unwrap_err();
    assert_eq!(ghost.code(), Some("UnknownPatient"), "{ghost:?}");
    assert_eq!(
        client
            .record_foot_details(&exam, FootSide::Right, true, -3)
            .unwrap_err()
            .code(),
        Some("NegativeCount")
    );
    let wrong_token = Client::new(&env.server.base_url(), "nope").unwrap();
    assert_eq!(
        wrong_token.create_exam("P001").unwrap_err().code(),
        Some("Unauthorized")
    );
}

#[test]
fn await_result_timeout_and_failure() {
    let env = start();
    let client = env.client();
    let png = demo_photo_png().unwrap();
    let exam = client.create_exam("P001").unwrap();
    let job = client.submit_foot_exam(&exam, FootSide::Left, true, 0, &png).unwrap();

    match client.await_result(&job, Duration::ZERO, Duration::from_millis(10)) {
        Err(ClientError::Timeout { job_id, .. }) => assert_eq!(job_id, job),
        other => panic!("{other:?}"),
    }

    let claimed = env.service.queue().claim_next("w").unwrap().unwrap();
    env.service.queue().fail(&claimed.job_id, "decode", 1).unwrap();
    match client.await_result(&job, Duration::from_secs(5), Duration::from_millis(10)) {
        Err(ClientError::JobFailed(reason)) => assert_eq!(reason, "decode"),
        other => panic!("{other:?}"),
    }
    assert_eq!(client.job("missing").unwrap_err().code(), Some("JobNotFound"));
}

/// The client adds no rules of its own: for the same requests it reports
/// exactly what a raw HTTP caller sees.
#[test]
fn client_matches_raw_http() {
    let env = start();
    let client = env.client();
    let raw = reqwest::blocking::Client::new();
    let base = env.server.base_url();
    let exam = client.create_exam("P001").unwrap();

    let raw_code = |method: reqwest::Method, path: &str, body: serde_json::Value| -> (u16, String) {
        let resp = raw
            .request(method, format!("{base}{path}"))
            .bearer_auth(TOKEN)
            .json(&body)
            .send()
            .unwrap();
        let status = resp.status().as_u16();
        let body: serde_json::Value = resp.json().unwrap();
        (status, body["error_code"].as_str().unwrap_or("").to_string())
    };
    let client_code = |err: ClientError| match err {
        ClientError::Server { status, code, .. } => (status, code),
        other => panic!("{other:?}"),
    };

    let cases: Vec<((u16, String), (u16, String))> = vec![
        (
            client_code(client.record_foot_details(&exam, FootSide::Left, true, -1).unwrap_err()),
            raw_code(
                reqwest::Method::PUT,
                &format!("/api/v1/exams/{exam}/feet/left"),
                serde_json::json!({"checked": true, "visible_ulcer_count": -1}),
            ),
        ),
        (
            client_code(
                client
                    .upload_photo(&exam, FootSide::Left, &demo_photo_png().unwrap())
                    .unwrap_err(),
            ),
            raw_code(
                reqwest::Method::POST,
                &format!("/api/v1/exams/{exam}/feet/left/photo"),
                serde_json::json!({"png_base64": base64_png()}),
            ),
        ),
        (
            client_code(client.confirm(&exam, FootSide::Right, true).unwrap_err()),
            raw_code(
                reqwest::Method::POST,
                &format!("/api/v1/exams/{exam}/feet/right/confirmation"),
                serde_json::json!({"agrees": true}),
            ),
        ),
        (
            client_code(client.complete_exam(&exam).unwrap_err()),
            raw_code(
                reqwest::Method::POST,
                &format!("/api/v1/exams/{exam}/complete"),
                serde_json::json!({}),
            ),
        ),
    ];
    for (via_client, via_raw) in cases {
        assert_eq!(via_client, via_raw);
    }
}

fn base64_png() -> String {
    use base64::Engine;
    base64::engine::general_purpose::STANDARD.encode(demo_photo_png().unwrap())
}
