//! Scripted exam used as a smoke test of the whole pipeline.

use std::io::Write;
use std::time::{Duration, Instant};

use anyhow::Context;
use footscan_client::Client;
use footscan_core::domain::FootSide;
use footscan_core::wire::HealthStatus;
use footscan_core::worker::WorkerPool;
use footscan_server::{AppState, ServerHandle};

use crate::config::Config;

pub const CLIENT_VERSION: &str = env!("CARGO_PKG_VERSION");

pub struct DemoOptions {
    pub patient: String,
    pub png: Vec<u8>,
    pub timeout: Duration,
}

/// How often the demo polls for results.
const POLL_EVERY: Duration = Duration::from_millis(50);

/// Starts a server and one worker on the configured store, seeds the patient
/// and runs the exam against them.
pub fn run_in_process(cfg: &Config, options: &DemoOptions, out: &mut impl Write) -> anyhow::Result<()> {
    let service = crate::open_service(cfg)?;
    service.register_patient(&options.patient)?;
    writeln!(out, "seeded patient {}", options.patient)?;

    let token = match cfg.token.as_deref() {
        Some(t) if !t.trim().is_empty() => t.to_string(),
        _ => footscan_core::store::new_id(),
    };
    let state = AppState::new(service.clone(), token.clone(), crate::version_policy(cfg)?);
    let server = ServerHandle::start("127.0.0.1:0".parse()?, state).context("starting in-process server")?;
    let pool = WorkerPool::spawn(
        1,
        "demo",
        service.queue().clone(),
        crate::detector(cfg)?,
        cfg.worker.clone(),
    );

    let outcome = run_remote(&server.base_url(), &token, options, out);
    pool.shutdown();
    server.stop()?;
    outcome
}

/// Runs the exam against a server at `base_url`.
pub fn run_remote(base_url: &str, token: &str, options: &DemoOptions, out: &mut impl Write) -> anyhow::Result<()> {
    let started = Instant::now();
    let client = Client::new(base_url, token)?;
    let check = client.check_server(CLIENT_VERSION).context("server check")?;
    let health = match check.status.status {
        HealthStatus::Ok => "ok",
        HealthStatus::Degraded => "degraded",
    };
    writeln!(out, "server {} is {health}", check.status.server_version)?;

    let exam = client.create_exam(&options.patient).context("creating exam")?;
    writeln!(out, "exam {exam} opened for patient {}", options.patient)?;

    let mut jobs = Vec::new();
    for side in FootSide::ALL {
        let job = client
            .submit_foot_exam(&exam, side, true, 1, &options.png)
            .with_context(|| format!("submitting {side} foot"))?;
        writeln!(out, "{side} foot: uploaded {} bytes, job {job}", options.png.len())?;
        jobs.push((side, job));
    }

    for (side, job) in &jobs {
        let result = client
            .await_result(job, options.timeout, POLL_EVERY)
            .with_context(|| format!("waiting for {side} foot result"))?;
        writeln!(out, "{side} foot: {} detection(s)", result.detections.len())?;
        for d in &result.detections {
            let b = d.bbox;
            writeln!(
                out,
                "  ({},{},{},{}) conf {:?}",
                b.left, b.top, b.width, b.height, d.confidence
            )?;
        }
        client
            .confirm(&exam, *side, true)
            .with_context(|| format!("confirming {side} foot"))?;
    }

    let done = client.complete_exam(&exam).context("completing exam")?;
    anyhow::ensure!(done.is_completed(), "server did not mark the exam completed");
    writeln!(out, "exam completed in {} ms", started.elapsed().as_millis())?;
    Ok(())
}
