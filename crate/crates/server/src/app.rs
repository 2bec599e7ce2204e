//! Routes and handlers shared by every mode.

use std::future::Future;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

use diffserve_core::pipelines::gray_to_png_base64;
use diffserve_core::preprocess::run_preprocessor;

use crate::admission::Admission;
use crate::backend::{Backend, OutputTarget};
use crate::error::ApiError;
use crate::schema::{
    GenerationRequest, GenerationResult, HealthReport, Limits, PreprocessRequest, PreprocessResult, TaskAccepted,
    TaskStatus,
};
use crate::tasks::{new_internal_id, TaskStore, DEFAULT_TTL};

pub const MAX_BODY_BYTES: usize = 64 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    Single,
    Worker,
    Router,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Single => "single",
            Mode::Worker => "worker",
            Mode::Router => "router",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub mode: Mode,
    pub concurrency: usize,
    pub queue_size: usize,
    pub output_dir: PathBuf,
    pub task_ttl: Duration,
    pub limits: Limits,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Single,
            concurrency: default_concurrency(),
            queue_size: 16,
            output_dir: PathBuf::from("outputs"),
            task_ttl: DEFAULT_TTL,
            limits: Limits::default(),
        }
    }
}

pub fn default_concurrency() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

pub struct AppState {
    pub backend: Arc<dyn Backend>,
    pub admission: Arc<Admission>,
    pub tasks: Arc<TaskStore>,
    pub config: ServerConfig,
}

impl AppState {
    pub fn new(backend: Arc<dyn Backend>, config: ServerConfig) -> Arc<Self> {
        Arc::new(Self {
            backend,
            admission: Admission::new(config.concurrency, config.queue_size),
            tasks: Arc::new(TaskStore::new(config.task_ttl)),
            config,
        })
    }

    pub fn health(&self) -> HealthReport {
        HealthReport {
            status: "ok".into(),
            mode: self.config.mode.as_str().into(),
            queue_depth: self.admission.queue_depth(),
            in_flight: self.admission.in_flight(),
            workers: self.backend.workers(),
        }
    }

    fn target(&self, id: &str) -> OutputTarget {
        OutputTarget {
            dir: self.config.output_dir.clone(),
            stem: id.to_string(),
        }
    }

    /// Validates, assigns a seed when the client gave none, and checks names
    /// and images against the backend.
    fn accept(&self, body: &[u8], id: &str) -> Result<(GenerationRequest, crate::backend::JobFuture), ApiError> {
        let mut req = GenerationRequest::parse(body, &self.config.limits)?;
        req.seed.get_or_insert_with(rand::random::<u64>);
        let job = self.backend.prepare(&req, self.target(id))?;
        Ok((req, job))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/generate", post(generate))
        .route("/tasks", post(submit_task))
        .route("/tasks/{id}", get(get_task))
        .route("/models", get(models))
        .route("/health", get(health))
        .route("/preprocess", post(preprocess))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

/// Best-effort `task_id` of a body that failed validation, so errors still echo it.
fn raw_task_id(body: &[u8]) -> String {
    serde_json::from_slice::<serde_json::Value>(body)
        .ok()
        .and_then(|v| v.get("task_id").and_then(|t| t.as_str()).map(str::to_string))
        .unwrap_or_default()
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

fn failure(e: &ApiError, task_id: &str, seed: Option<u64>, start: Instant) -> Response {
    (e.status, Json(GenerationResult::failure(task_id, seed, elapsed_ms(start), &e.message))).into_response()
}

async fn generate(State(s): State<Arc<AppState>>, body: Bytes) -> Response {
    let start = Instant::now();
    let id = new_internal_id();
    let (req, job) = match s.accept(&body, &id) {
        Ok(x) => x,
        Err(e) => return failure(&e, &raw_task_id(&body), None, start),
    };
    let Some(ticket) = s.admission.try_admit() else {
        return failure(&queue_full(&s), &req.task_id, req.seed, start);
    };
    // Spawned so a client hanging up cannot cancel a job that holds a run slot.
    let outcome = tokio::spawn(ticket.run(|| {}, job))
        .await
        .unwrap_or_else(|e| Err(ApiError::internal(format!("job panicked: {e}"))));
    match outcome {
        Ok(images) => {
            let result = GenerationResult {
                task_id: req.task_id.clone(),
                success: true,
                images,
                seed: req.seed,
                elapsed_ms: elapsed_ms(start),
                error: None,
            };
            tracing::info!(task_id = %req.task_id, func = req.func_name.as_str(), ms = result.elapsed_ms, "generated");
            (StatusCode::OK, Json(result)).into_response()
        }
        Err(e) => {
            tracing::warn!(task_id = %req.task_id, error = %e, "generation failed");
            failure(&e, &req.task_id, req.seed, start)
        }
    }
}

fn queue_full(s: &AppState) -> ApiError {
    ApiError::unavailable(format!(
        "queue full ({} running, {} waiting)",
        s.admission.concurrency(),
        s.admission.queue_size()
    ))
}

async fn submit_task(State(s): State<Arc<AppState>>, body: Bytes) -> Response {
    let start = Instant::now();
    let id = new_internal_id();
    let (req, job) = match s.accept(&body, &id) {
        Ok(x) => x,
        Err(e) => return failure(&e, &raw_task_id(&body), None, start),
    };
    let Some(ticket) = s.admission.try_admit() else {
        return failure(&queue_full(&s), &req.task_id, req.seed, start);
    };
    let record = s.tasks.create(&id, &req.task_id);
    let tasks = Arc::clone(&s.tasks);
    tokio::spawn(async move {
        let tasks_start = Arc::clone(&tasks);
        let run_id = id.clone();
        let outcome = ticket
            .run(move || {
                tasks_start.advance(&run_id, TaskStatus::Running, None);
            }, job)
            .await;
        let ms = elapsed_ms(start);
        let (status, result) = match outcome {
            Ok(images) => (
                TaskStatus::Done,
                GenerationResult {
                    task_id: req.task_id.clone(),
                    success: true,
                    images,
                    seed: req.seed,
                    elapsed_ms: ms,
                    error: None,
                },
            ),
            Err(e) => (TaskStatus::Failed, GenerationResult::failure(&req.task_id, req.seed, ms, &e.message)),
        };
        tasks.advance(&id, status, Some(result));
    });
    let accepted = TaskAccepted {
        id: record.id,
        task_id: record.task_id,
        status: record.status,
    };
    (StatusCode::ACCEPTED, Json(accepted)).into_response()
}

async fn get_task(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> Response {
    match s.tasks.get(&id) {
        Some(r) => Json(r).into_response(),
        None => ApiError::not_found(format!("unknown or expired task `{id}`")).into_response(),
    }
}

async fn models(State(s): State<Arc<AppState>>) -> Response {
    match s.backend.registry() {
        Ok(r) => Json(r.models).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn health(State(s): State<Arc<AppState>>) -> Json<HealthReport> {
    Json(s.health())
}

async fn preprocess(body: Bytes) -> Response {
    let run = move || -> Result<PreprocessResult, ApiError> {
        let req = PreprocessRequest::parse(&body)?;
        let kind = req.kind()?;
        let image = diffserve_core::pipelines::from_png_base64(&req.image)
            .map_err(|e| ApiError::bad_request(format!("image: {e}")))?;
        let (lo, hi) = req.thresholds();
        let map = run_preprocessor(kind, &image, lo, hi)?;
        Ok(PreprocessResult {
            image: gray_to_png_base64(&map)?,
            preprocessor: req.preprocessor.unwrap_or_else(|| "canny".into()),
            width: map.width,
            height: map.height,
        })
    };
    match tokio::task::spawn_blocking(run).await {
        Ok(Ok(r)) => Json(r).into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(e) => ApiError::internal(e.to_string()).into_response(),
    }
}

/// Serves until `shutdown` resolves, sweeping expired tasks in the background.
pub async fn serve(
    listener: TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let tasks = Arc::clone(&state.tasks);
    let period = tasks.ttl().clamp(Duration::from_millis(100), Duration::from_secs(30));
    let sweeper = tokio::spawn(async move {
        let mut tick = tokio::time::interval(period);
        loop {
            tick.tick().await;
            tasks.purge();
        }
    });
    let out = axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await;
    sweeper.abort();
    out
}

/// A server on an ephemeral local port, for tests and embedding.
pub struct RunningServer {
    pub addr: SocketAddr,
    pub state: Arc<AppState>,
    handle: JoinHandle<std::io::Result<()>>,
}

impl RunningServer {
    pub async fn start(state: Arc<AppState>) -> std::io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0").await?;
        let addr = listener.local_addr()?;
        let handle = tokio::spawn(serve(listener, Arc::clone(&state), std::future::pending()));
        Ok(Self { addr, state, handle })
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.addr)
    }
}

impl Drop for RunningServer {
    fn drop(&mut self) {
        self.handle.abort();
    }
}
