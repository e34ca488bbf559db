//! HTTP/JSON gateway over [`ExamService`].
//!
//! Every route except `GET /api/v1/status` needs `Authorization: Bearer
//! <token>`. Store calls run on the blocking pool.

mod error;

use std::future::Future;
use std::io;
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Instant;

use axum::extract::{DefaultBodyLimit, FromRequest, Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use base64::Engine;
use footscan_core::domain::{ExamRecord, FootRecord, FootSide};
use footscan_core::service::{ExamService, ServiceError};
use footscan_core::wire::{
    ConfirmationRequest, CreateExamRequest, CreateExamResponse, FootDetailsRequest, HealthStatus, JobView,
    PhotoUploadRequest, PhotoUploadResponse, StatusReport, VersionCheck,
};
use semver::Version;
use serde::Deserialize;
use tokio::sync::oneshot;

pub use error::ApiError;

pub const SERVER_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const DEFAULT_LISTEN: &str = "127.0.0.1:8080";

/// Which client versions may talk to this server.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VersionPolicy {
    min_supported: Version,
    current: Version,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PolicyError {
    #[error("malformed version {0:?}")]
    Malformed(String),
    #[error("min_supported {min} is newer than current {current}")]
    MinAboveCurrent { min: Version, current: Version },
}

impl VersionPolicy {
    pub fn new(min_supported: &str, current: &str) -> Result<Self, PolicyError> {
        let parse = |s: &str| Version::parse(s).map_err(|_| PolicyError::Malformed(s.to_string()));
        let (min_supported, current) = (parse(min_supported)?, parse(current)?);
        if min_supported > current {
            return Err(PolicyError::MinAboveCurrent {
                min: min_supported,
                current,
            });
        }
        Ok(Self { min_supported, current })
    }

    pub fn min_supported(&self) -> &Version {
        &self.min_supported
    }

    pub fn current(&self) -> &Version {
        &self.current
    }

    pub fn check(&self, client: &str) -> Result<VersionCheck, PolicyError> {
        let client = Version::parse(client.trim()).map_err(|_| PolicyError::Malformed(client.to_string()))?;
        Ok(VersionCheck {
            compatible: client >= self.min_supported,
            min_supported: self.min_supported.to_string(),
            current: self.current.to_string(),
        })
    }
}

impl Default for VersionPolicy {
    fn default() -> Self {
        Self::new(SERVER_VERSION, SERVER_VERSION).expect("package version is semver")
    }
}

#[derive(Clone)]
pub struct AppState {
    service: ExamService,
    token: Arc<str>,
    policy: Arc<VersionPolicy>,
}

impl AppState {
    pub fn new(service: ExamService, token: impl Into<String>, policy: VersionPolicy) -> Self {
        Self {
            service,
            token: token.into().into(),
            policy: Arc::new(policy),
        }
    }

    pub fn service(&self) -> &ExamService {
        &self.service
    }
}

/// Request bodies may carry a base64 photo at the size cap plus some slack
/// for the JSON around it.
fn body_limit(max_photo_bytes: u64) -> usize {
    (max_photo_bytes as usize).div_ceil(3) * 4 + 64 * 1024
}

pub fn router(state: AppState) -> Router {
    let limit = body_limit(state.service.store().config().max_photo_bytes);
    let protected = Router::new()
        .route("/api/v1/version", get(version))
        .route("/api/v1/exams", post(create_exam))
        .route("/api/v1/exams/{id}", get(get_exam))
        .route("/api/v1/exams/{id}/feet/{side}", put(record_foot))
        .route("/api/v1/exams/{id}/feet/{side}/photo", post(upload_photo))
        .route("/api/v1/exams/{id}/feet/{side}/confirmation", post(confirm))
        .route("/api/v1/exams/{id}/complete", post(complete))
        .route("/api/v1/jobs/{id}", get(job))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/api/v1/status", get(status))
        .merge(protected)
        .fallback(not_found)
        .method_not_allowed_fallback(method_not_allowed)
        .layer(DefaultBodyLimit::max(limit))
        .layer(middleware::from_fn(access_log))
        .with_state(state)
}

async fn access_log(req: Request, next: Next) -> Response {
    let started = Instant::now();
    let method = req.method().clone();
    let path = req.uri().path().to_string();
    let response = next.run(req).await;
    log::info!(
        target: "footscan::access",
        "method={} path={} status={} latency_ms={:.1}",
        method,
        path,
        response.status().as_u16(),
        started.elapsed().as_secs_f64() * 1000.0
    );
    response
}

async fn require_token(State(state): State<AppState>, req: Request, next: Next) -> Response {
    let presented = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    match presented {
        Some(token) if constant_time_eq(token.as_bytes(), state.token.as_bytes()) => next.run(req).await,
        _ => ApiError::new(
            StatusCode::UNAUTHORIZED,
            "Unauthorized",
            "missing or invalid bearer token",
        )
        .into_response(),
    }
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "NotFound", "no such route")
}

async fn method_not_allowed() -> ApiError {
    ApiError::new(
        StatusCode::METHOD_NOT_ALLOWED,
        "MethodNotAllowed",
        "method not allowed on this route",
    )
}

/// JSON body extractor whose rejections use the API error format.
struct ApiJson<T>(T);

impl<S, T> FromRequest<S> for ApiJson<T>
where
    Json<T>: FromRequest<S, Rejection = axum::extract::rejection::JsonRejection>,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        let Json(value) = Json::<T>::from_request(req, state).await?;
        Ok(ApiJson(value))
    }
}

fn parse_side(side: &str) -> Result<FootSide, ApiError> {
    side.parse()
        .map_err(|_| ApiError::bad_request("InvalidSide", format!("foot side must be left or right, got {side:?}")))
}

async fn blocking<T, F>(state: &AppState, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&ExamService) -> Result<T, ServiceError> + Send + 'static,
{
    let service = state.service.clone();
    tokio::task::spawn_blocking(move || f(&service))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
        .map_err(ApiError::from)
}

async fn status(State(state): State<AppState>) -> Json<StatusReport> {
    let service = state.service.clone();
    let probe = tokio::task::spawn_blocking(move || {
        service.store().ping().ok()?;
        service.queue_stats().ok()
    })
    .await
    .ok()
    .flatten();
    Json(StatusReport {
        status: if probe.is_some() {
            HealthStatus::Ok
        } else {
            HealthStatus::Degraded
        },
        store_ok: probe.is_some(),
        queue: probe.unwrap_or_default(),
        server_version: SERVER_VERSION.to_string(),
    })
}

#[derive(Deserialize)]
struct VersionQuery {
    client: Option<String>,
}

async fn version(State(state): State<AppState>, Query(q): Query<VersionQuery>) -> Result<Json<VersionCheck>, ApiError> {
    let client = q
        .client
        .ok_or_else(|| ApiError::bad_request("MalformedVersion", "missing client query parameter"))?;
    state
        .policy
        .check(&client)
        .map(Json)
        .map_err(|e| ApiError::bad_request("MalformedVersion", e.to_string()))
}

async fn create_exam(
    State(state): State<AppState>,
    ApiJson(body): ApiJson<CreateExamRequest>,
) -> Result<(StatusCode, Json<CreateExamResponse>), ApiError> {
    let exam = blocking(&state, move |s| s.create_exam(&body.patient_id)).await?;
    Ok((StatusCode::CREATED, Json(CreateExamResponse { exam_id: exam.exam_id })))
}

async fn get_exam(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<ExamRecord>, ApiError> {
    let (exam, _) = blocking(&state, move |s| s.exam(&id)).await?;
    Ok(Json(exam))
}

async fn record_foot(
    State(state): State<AppState>,
    Path((id, side)): Path<(String, String)>,
    ApiJson(body): ApiJson<FootDetailsRequest>,
) -> Result<Json<FootRecord>, ApiError> {
    let side = parse_side(&side)?;
    let foot = blocking(&state, move |s| {
        s.record_foot_details(&id, side, body.checked, body.visible_ulcer_count)
    })
    .await?;
    Ok(Json(foot))
}

async fn upload_photo(
    State(state): State<AppState>,
    Path((id, side)): Path<(String, String)>,
    ApiJson(body): ApiJson<PhotoUploadRequest>,
) -> Result<(StatusCode, Json<PhotoUploadResponse>), ApiError> {
    let side = parse_side(&side)?;
    let png = base64::engine::general_purpose::STANDARD
        .decode(body.png_base64.trim())
        .map_err(|e| ApiError::bad_request("BadImage", format!("png_base64 is not valid base64: {e}")))?;
    let (meta, job) = blocking(&state, move |s| s.upload_photo(&id, side, &png)).await?;
    Ok((
        StatusCode::ACCEPTED,
        Json(PhotoUploadResponse {
            photo_id: meta.photo_id,
            job_id: job.job_id,
        }),
    ))
}

async fn confirm(
    State(state): State<AppState>,
    Path((id, side)): Path<(String, String)>,
    ApiJson(body): ApiJson<ConfirmationRequest>,
) -> Result<Json<FootRecord>, ApiError> {
    let side = parse_side(&side)?;
    let foot = blocking(&state, move |s| s.record_confirmation(&id, side, body.agrees)).await?;
    Ok(Json(foot))
}

async fn complete(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<ExamRecord>, ApiError> {
    let exam = blocking(&state, move |s| s.complete_exam(&id)).await?;
    Ok(Json(exam))
}

async fn job(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<JobView>, ApiError> {
    let job = blocking(&state, move |s| s.job(&id)).await?;
    Ok(Json(JobView::from(&job)))
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}

/// A server running on its own runtime thread; stopped on drop.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<io::Result<()>>>,
}

impl ServerHandle {
    /// Binds `addr` (port 0 picks a free port) and starts serving.
    pub fn start(addr: SocketAddr, state: AppState) -> io::Result<ServerHandle> {
        let listener = std::net::TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let (stop, stopped) = oneshot::channel::<()>();
        let thread = thread::Builder::new().name("footscan-http".into()).spawn(move || {
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener)?;
                serve(listener, state, async {
                    let _ = stopped.await;
                })
                .await
            })
        })?;
        Ok(ServerHandle {
            addr,
            stop: Some(stop),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(mut self) -> io::Result<()> {
        self.shutdown()
    }

    fn shutdown(&mut self) -> io::Result<()> {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        match self.thread.take() {
            Some(t) => t
                .join()
                .unwrap_or_else(|_| Err(io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.shutdown();
    }
}
