use std::net::TcpListener;
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use tempfile::TempDir;

fn footscan(data_dir: &Path) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_footscan"));
    cmd.env("FOOTSCAN_DATA_DIR", data_dir)
        .env_remove("FOOTSCAN_CONFIG")
        .env_remove("FOOTSCAN_TOKEN")
        .env_remove("FOOTSCAN_LISTEN");
    cmd
}

fn run(data_dir: &Path, args: &[&str]) -> Output {
    footscan(data_dir).args(args).output().unwrap()
}

fn stdout(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {}: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn seeded_patient_has_a_qr_payload() {
    let dir = TempDir::new().unwrap();
    assert_eq!(
        stdout(&run(dir.path(), &["seed-patient", "--id", "P001"])),
        "seeded patient P001\n"
    );
    assert_eq!(stdout(&run(dir.path(), &["qr", "--id", "P001"])), "P001\n");
}

#[test]
fn unknown_patient_has_no_qr() {
    let dir = TempDir::new().unwrap();
    let out = run(dir.path(), &["qr", "--id", "NOPE"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("not registered"));
}

#[test]
fn empty_queue_counts() {
    let dir = TempDir::new().unwrap();
    assert_eq!(
        stdout(&run(dir.path(), &["queue", "--list"])),
        "pending=0 in_progress=0 complete=0 failed=0\n"
    );
}

#[test]
fn demo_then_queue_and_export() {
    let dir = TempDir::new().unwrap();
    let out = stdout(&run(dir.path(), &["demo-exam", "--patient", "P042"]));
    assert!(out.starts_with("seeded patient P042\nserver 0.1.0 is ok\n"), "{out}");
    assert_eq!(out.matches("(20,30,20,20) conf 1.0").count(), 2, "{out}");
    assert!(out.contains("exam completed in"), "{out}");

    let queue = stdout(&run(dir.path(), &["queue", "--list"]));
    assert!(
        queue.starts_with("pending=0 in_progress=0 complete=2 failed=0\n"),
        "{queue}"
    );
    assert_eq!(queue.matches("state=complete attempts=1").count(), 2, "{queue}");

    let dest = dir.path().join("export");
    let out = stdout(&run(dir.path(), &["export", "--dest", dest.to_str().unwrap()]));
    assert!(out.starts_with("exported 2 photo(s)"), "{out}");
    let manifest = std::fs::read_to_string(dest.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 3, "{manifest}");
}

#[test]
fn object_store_strategy_from_flag() {
    let dir = TempDir::new().unwrap();
    stdout(&run(dir.path(), &["--blob-strategy", "object-store", "demo-exam"]));
    let blobs = std::fs::read_dir(dir.path().join("blobs")).unwrap().count();
    assert!(blobs > 0);
}

#[test]
fn config_file_is_read() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("footscan.toml");
    std::fs::write(&cfg, format!("data_dir = {:?}\n", dir.path().join("from-config"))).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_footscan"))
        .args(["--config", cfg.to_str().unwrap(), "seed-patient", "--id", "P7"])
        .env_remove("FOOTSCAN_DATA_DIR")
        .output()
        .unwrap();
    stdout(&out);
    assert!(dir.path().join("from-config/footscan.db").exists());

    std::fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let out = footscan(dir.path())
        .args(["--config", cfg.to_str().unwrap(), "queue"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn serve_requires_a_token() {
    let dir = TempDir::new().unwrap();
    let out = run(dir.path(), &["serve"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("token"));
}

#[test]
fn synth_image_reports_lesions() {
    let dir = TempDir::new().unwrap();
    let png = dir.path().join("scene.png");
    let out = stdout(&run(
        dir.path(),
        &["synth-image", "--out", png.to_str().unwrap(), "--seed", "3"],
    ));
    assert!(out.contains("lesion left="), "{out}");
    assert!(std::fs::metadata(&png).unwrap().len() > 0);
}

struct Killed(Child);

impl Drop for Killed {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

#[test]
fn separate_server_and_worker_processes() {
    let dir = TempDir::new().unwrap();
    stdout(&run(dir.path(), &["seed-patient", "--id", "P900"]));
    let listen = format!("127.0.0.1:{}", free_port());
    let spawn = |args: &[&str]| {
        Killed(
            footscan(dir.path())
                .args(args)
                .env("FOOTSCAN_TOKEN", "t0ken")
                .stdout(Stdio::null())
                .stderr(Stdio::null())
                .spawn()
                .unwrap(),
        )
    };
    let _server = spawn(&["--listen", &listen, "serve"]);
    let _worker = spawn(&["--poll-interval-ms", "20", "work", "--workers", "2"]);

    let deadline = Instant::now() + Duration::from_secs(10);
    while std::net::TcpStream::connect(&listen).is_err() {
        assert!(Instant::now() < deadline, "server never came up");
        thread::sleep(Duration::from_millis(20));
    }

    let url = format!("http://{listen}");
    let out = footscan(dir.path())
        .args(["demo-exam", "--patient", "P900", "--server", &url])
        .env("FOOTSCAN_TOKEN", "t0ken")
        .output()
        .unwrap();
    let out = stdout(&out);
    assert_eq!(out.matches("(20,30,20,20) conf 1.0").count(), 2, "{out}");

    let out = footscan(dir.path())
        .args(["demo-exam", "--patient", "P900", "--server", &url])
        .env("FOOTSCAN_TOKEN", "wrong")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Unauthorized"));
}
