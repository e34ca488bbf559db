//! Concurrency drivers for the job queue: FIFO under a concurrent producer
//! and racing claimers with a conservation monitor.

use std::collections::HashSet;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Barrier};
use std::thread;
use std::time::Duration;

use chrono::Utc;
use footscan_core::domain::{FootSide, InferenceResult};
use footscan_core::queue::JobQueue;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// Photo id every stress job points at. Callers store it once up front.
pub const STRESS_PHOTO: &str = "stressphoto";

fn done(job_id: &str) -> InferenceResult {
    InferenceResult::new(job_id, vec![], Utc::now(), "stress")
}

/// One producer enqueues `n` jobs with random pauses while a single consumer
/// claims and completes them. Returns the enqueue order and the completion
/// order.
pub fn fifo_run(queue: &JobQueue, n: usize, seed: u64) -> Result<(Vec<String>, Vec<String>), String> {
    let producer = {
        let queue = queue.clone();
        thread::spawn(move || -> Result<Vec<String>, String> {
            let mut rng = StdRng::seed_from_u64(seed);
            let mut enqueued = Vec::with_capacity(n);
            for i in 0..n {
                if rng.gen_bool(0.1) {
                    thread::sleep(Duration::from_micros(rng.gen_range(0..300)));
                }
                let job = queue
                    .enqueue(&format!("fifo{seed}-{i}"), FootSide::Left, STRESS_PHOTO)
                    .map_err(|e| e.to_string())?;
                enqueued.push(job.job_id);
            }
            Ok(enqueued)
        })
    };

    let mut producer = Some(producer);
    let mut enqueued = None;
    let mut completed = Vec::with_capacity(n);
    while completed.len() < n {
        match queue.claim_next("fifo").map_err(|e| e.to_string())? {
            Some(job) => {
                queue
                    .complete(&job.job_id, &done(&job.job_id))
                    .map_err(|e| e.to_string())?;
                completed.push(job.job_id);
            }
            None if enqueued.is_some() => {
                return Err(format!("queue empty after {} of {n} completions", completed.len()));
            }
            None => {
                if producer.as_ref().is_some_and(|p| p.is_finished()) {
                    let handle = producer.take().expect("checked above");
                    enqueued = Some(handle.join().map_err(|_| "producer panicked")??);
                } else {
                    thread::yield_now();
                }
            }
        }
    }
    let enqueued = match (enqueued, producer) {
        (Some(e), _) => e,
        (None, Some(handle)) => handle.join().map_err(|_| "producer panicked")??,
        (None, None) => unreachable!("producer is joined at most once"),
    };
    Ok((enqueued, completed))
}

#[derive(Debug, Default, Clone, Copy)]
pub struct RaceStats {
    pub claimed: usize,
    pub duplicates: usize,
    /// Times the monitor checked conservation while claims were running.
    pub checkpoints: u64,
    pub conservation_failures: u64,
}

/// Enqueues `jobs` jobs, then lets `claimers` threads claim until the queue
/// is empty while a monitor checks that the job total never changes.
/// `already_enqueued` is how many jobs the queue held beforehand.
pub fn claim_race(
    queue: &JobQueue,
    round: usize,
    claimers: usize,
    jobs: usize,
    already_enqueued: u64,
) -> Result<RaceStats, String> {
    let mut expected = HashSet::with_capacity(jobs);
    for j in 0..jobs {
        let job = queue
            .enqueue(&format!("race{round}-{j}"), FootSide::Right, STRESS_PHOTO)
            .map_err(|e| e.to_string())?;
        expected.insert(job.job_id);
    }
    let total = already_enqueued + jobs as u64;

    let barrier = Arc::new(Barrier::new(claimers + 1));
    let stop = Arc::new(AtomicBool::new(false));
    let checkpoints = Arc::new(AtomicU64::new(0));
    let failures = Arc::new(AtomicU64::new(0));
    let monitor = {
        let (queue, stop, checkpoints, failures, barrier) = (
            queue.clone(),
            stop.clone(),
            checkpoints.clone(),
            failures.clone(),
            barrier.clone(),
        );
        thread::spawn(move || {
            barrier.wait();
            loop {
                let finished = stop.load(Ordering::SeqCst);
                match queue.stats() {
                    Ok(stats) if stats.total() == total => {}
                    _ => {
                        failures.fetch_add(1, Ordering::Relaxed);
                    }
                }
                checkpoints.fetch_add(1, Ordering::Relaxed);
                if finished {
                    break;
                }
            }
        })
    };
    let handles: Vec<_> = (0..claimers)
        .map(|w| {
            let (queue, barrier) = (queue.clone(), barrier.clone());
            thread::spawn(move || -> Result<Vec<String>, String> {
                barrier.wait();
                let mut mine = Vec::new();
                while let Some(job) = queue.claim_next(&format!("c{w}")).map_err(|e| e.to_string())? {
                    mine.push(job.job_id);
                }
                Ok(mine)
            })
        })
        .collect();
    let mut claimed = Vec::with_capacity(jobs);
    for h in handles {
        claimed.extend(h.join().map_err(|_| "claimer panicked")??);
    }
    stop.store(true, Ordering::SeqCst);
    monitor.join().map_err(|_| "monitor panicked")?;

    let unique: HashSet<&String> = claimed.iter().collect();
    if unique.len() != jobs || !claimed.iter().all(|id| expected.contains(id)) {
        return Err(format!(
            "round {round}: claimed {} distinct of {jobs} jobs",
            unique.len()
        ));
    }
    let stats = queue.stats().map_err(|e| e.to_string())?;
    if stats.pending != 0 {
        return Err(format!("round {round}: {} jobs left pending", stats.pending));
    }
    Ok(RaceStats {
        claimed: claimed.len(),
        duplicates: claimed.len() - unique.len(),
        checkpoints: checkpoints.load(Ordering::Relaxed),
        conservation_failures: failures.load(Ordering::Relaxed),
    })
}
