//! `footscan`: run the server and workers, seed patients, inspect the queue,
//! export the dataset and drive a scripted exam end to end.

mod config;
mod demo;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::mpsc;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use footscan_core::detector::RednessDetector;
use footscan_core::domain::{BlobStrategy, PatientRef};
use footscan_core::imaging::encode_png;
use footscan_core::queue::JobQueue;
use footscan_core::service::ExamService;
use footscan_core::store::Store;
use footscan_core::synthetic::{demo_photo_png, Scene};
use footscan_core::worker::WorkerPool;
use footscan_server::{AppState, ServerHandle, VersionPolicy};

use crate::config::Config;

#[derive(Debug, Parser)]
#[command(name = "footscan", version, about = "Remote foot-ulcer triage service")]
struct Cli {
    /// TOML config file.
    #[arg(long, global = true, env = "FOOTSCAN_CONFIG")]
    config: Option<PathBuf>,
    /// Directory holding the database and object-store blobs.
    #[arg(long, global = true, env = "FOOTSCAN_DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// Where new photos are kept: inline or object-store.
    #[arg(long, global = true, env = "FOOTSCAN_BLOB_STRATEGY")]
    blob_strategy: Option<BlobStrategy>,
    /// Bearer token clients must present.
    #[arg(long, global = true, env = "FOOTSCAN_TOKEN", hide_env_values = true)]
    token: Option<String>,
    /// Address the HTTP server listens on.
    #[arg(long, global = true, env = "FOOTSCAN_LISTEN")]
    listen: Option<SocketAddr>,
    /// Worker poll interval in milliseconds.
    #[arg(long, global = true)]
    poll_interval_ms: Option<u64>,
    /// Minimum redness for a pixel to count as lesion.
    #[arg(long, global = true)]
    redness_threshold: Option<f64>,
    /// Detections below this confidence are dropped.
    #[arg(long, global = true)]
    report_threshold: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the HTTP API until interrupted.
    Serve,
    /// Run inference workers until interrupted.
    Work {
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Register a patient so exams can be opened for them.
    SeedPatient {
        #[arg(long)]
        id: String,
    },
    /// Print the QR payload for a registered patient.
    Qr {
        #[arg(long)]
        id: String,
    },
    /// Show queue counts.
    Queue {
        /// Also list every job.
        #[arg(long)]
        list: bool,
    },
    /// Put a failed job back on the queue.
    Requeue {
        #[arg(long)]
        job: String,
    },
    /// Write every photo plus a manifest.csv to a directory.
    Export {
        #[arg(long)]
        dest: PathBuf,
    },
    /// Run a full exam: create, record both feet, upload, wait for results,
    /// confirm and complete.
    DemoExam {
        #[arg(long, default_value = "DEMO-001")]
        patient: String,
        /// PNG to upload for each foot. Defaults to a built-in test image.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Use a running server instead of starting one in-process. Workers
        /// must already be running against the same store.
        #[arg(long)]
        server: Option<String>,
        /// Seconds to wait for each result.
        #[arg(long, default_value_t = 30)]
        timeout_secs: u64,
    },
    /// Write a synthetic foot photo with planted lesions.
    SynthImage {
        #[arg(long)]
        out: PathBuf,
        /// Generate a random scene instead of the reference square.
        #[arg(long)]
        seed: Option<u64>,
    },
}

impl Cli {
    fn resolve_config(&self) -> anyhow::Result<Config> {
        let mut cfg = match &self.config {
            Some(path) => Config::load(path)?,
            None => Config::default(),
        };
        if let Some(dir) = &self.data_dir {
            cfg.data_dir = dir.clone();
        }
        if let Some(strategy) = self.blob_strategy {
            cfg.blob_strategy = strategy;
        }
        if let Some(token) = &self.token {
            cfg.token = Some(token.clone());
        }
        if let Some(listen) = self.listen {
            cfg.listen = listen;
        }
        if let Some(ms) = self.poll_interval_ms {
            cfg.worker.poll_interval = std::time::Duration::from_millis(ms);
        }
        if let Some(t) = self.redness_threshold {
            cfg.detector.redness_threshold = t;
        }
        if let Some(t) = self.report_threshold {
            cfg.detector.report_threshold = t;
        }
        Ok(cfg)
    }
}

fn open_service(cfg: &Config) -> anyhow::Result<ExamService> {
    std::fs::create_dir_all(&cfg.data_dir).with_context(|| format!("creating {}", cfg.data_dir.display()))?;
    let store = Store::open(cfg.store()).context("opening store")?;
    Ok(ExamService::new(JobQueue::new(Arc::new(store), cfg.queue.clone())))
}

fn version_policy(cfg: &Config) -> anyhow::Result<VersionPolicy> {
    let current = footscan_server::SERVER_VERSION;
    let min = cfg.min_client_version.as_deref().unwrap_or(current);
    Ok(VersionPolicy::new(min, current)?)
}

fn detector(cfg: &Config) -> anyhow::Result<Arc<RednessDetector>> {
    Ok(Arc::new(
        RednessDetector::new(cfg.detector.clone()).context("invalid detector settings")?,
    ))
}

/// Blocks until Ctrl-C.
fn wait_for_interrupt() -> anyhow::Result<()> {
    let (tx, rx) = mpsc::channel();
    ctrlc::set_handler(move || {
        let _ = tx.send(());
    })?;
    let _ = rx.recv();
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    // Long-running commands log requests and jobs; one-shot commands only
    // report problems.
    let default_filter = match cli.command {
        Command::Serve | Command::Work { .. } => "info",
        _ => "warn",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default_filter)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = cli.resolve_config()?;

    match cli.command {
        Command::Serve => {
            let service = open_service(&cfg)?;
            let state = AppState::new(service, cfg.require_token()?, version_policy(&cfg)?);
            let server = ServerHandle::start(cfg.listen, state).with_context(|| format!("binding {}", cfg.listen))?;
            log::info!("listening on {}", server.base_url());
            wait_for_interrupt()?;
            log::info!("shutting down");
            server.stop()?;
        }
        Command::Work { workers } => {
            if workers == 0 {
                bail!("--workers must be at least 1");
            }
            let service = open_service(&cfg)?;
            let pool = WorkerPool::spawn(
                workers,
                "worker",
                service.queue().clone(),
                detector(&cfg)?,
                cfg.worker.clone(),
            );
            log::info!("{workers} worker(s) polling every {:?}", cfg.worker.poll_interval);
            wait_for_interrupt()?;
            log::info!("stopping workers");
            pool.shutdown();
        }
        Command::SeedPatient { id } => {
            let patient = open_service(&cfg)?.register_patient(&id)?;
            println!("seeded patient {}", patient.patient_id);
        }
        Command::Qr { id } => {
            let service = open_service(&cfg)?;
            let patient = PatientRef::new(id.trim())?;
            if !service.store().patient_exists(&patient.patient_id)? {
                bail!("patient {} is not registered", patient.patient_id);
            }
            println!("{}", patient.qr_payload());
        }
        Command::Queue { list } => {
            let service = open_service(&cfg)?;
            let stats = service.queue_stats()?;
            println!(
                "pending={} in_progress={} complete={} failed={}",
                stats.pending, stats.in_progress, stats.complete, stats.failed
            );
            if list {
                for job in service.queue().jobs()? {
                    println!(
                        "{} seq={} exam={} side={} state={} attempts={}{}",
                        job.job_id,
                        job.seq,
                        job.exam_id,
                        job.side,
                        job.state.as_str(),
                        job.attempts,
                        job.failure_reason.map(|r| format!(" reason={r}")).unwrap_or_default()
                    );
                }
            }
        }
        Command::Requeue { job } => {
            let job = open_service(&cfg)?.queue().requeue(&job)?;
            println!("{} is {}", job.job_id, job.state.as_str());
        }
        Command::Export { dest } => {
            let count = open_service(&cfg)?.store().export_dataset(&dest)?;
            println!("exported {count} photo(s) to {}", dest.display());
        }
        Command::DemoExam {
            patient,
            image,
            server,
            timeout_secs,
        } => {
            let png = match &image {
                Some(path) => std::fs::read(path).with_context(|| format!("reading {}", path.display()))?,
                None => demo_photo_png()?,
            };
            let options = demo::DemoOptions {
                patient,
                png,
                timeout: std::time::Duration::from_secs(timeout_secs),
            };
            let mut out = std::io::stdout().lock();
            match server {
                Some(url) => demo::run_remote(&url, cfg.require_token()?, &options, &mut out)?,
                None => demo::run_in_process(&cfg, &options, &mut out)?,
            }
        }
        Command::SynthImage { out, seed } => {
            let png = match seed {
                None => demo_photo_png()?,
                Some(seed) => {
                    let scene = Scene::generate(seed);
                    for lesion in &scene.lesions {
                        println!(
                            "lesion left={} top={} width={} height={}",
                            lesion.left, lesion.top, lesion.width, lesion.height
                        );
                    }
                    encode_png(&scene.image)?
                }
            };
            std::fs::write(&out, &png).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {} ({} bytes)", out.display(), png.len());
        }
    }
    Ok(())
}
