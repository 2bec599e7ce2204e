use std::sync::{Arc, RwLock};
use std::time::Duration;

use axum::http::StatusCode;
use diffserve_core::models::{Registry, RegistryEntry};
use tokio::task::JoinSet;
use tokio::time::MissedTickBehavior;

use super::policy::WorkerRecord;
use super::table::WorkerTable;
use crate::backend::{resolve, Backend, JobFuture, OutputTarget};
use crate::error::ApiError;
use crate::schema::{GenerationRequest, GenerationResult, HealthReport};

/// Forwards each admitted request to the least-loaded healthy worker, trying a
/// second worker once if the first cannot be reached or fails server-side.
pub struct RouterBackend {
    table: Arc<WorkerTable>,
    client: reqwest::Client,
    registry: RwLock<Option<Registry>>,
}

impl RouterBackend {
    pub fn new(table: Arc<WorkerTable>) -> Arc<Self> {
        Arc::new(Self {
            table,
            client: reqwest::Client::new(),
            registry: RwLock::new(None),
        })
    }

    pub fn table(&self) -> &Arc<WorkerTable> {
        &self.table
    }

    pub fn client(&self) -> &reqwest::Client {
        &self.client
    }

    pub fn has_registry(&self) -> bool {
        self.registry.read().unwrap().is_some()
    }

    pub fn set_registry(&self, registry: Registry) {
        *self.registry.write().unwrap() = Some(registry);
    }
}

impl Backend for RouterBackend {
    fn registry(&self) -> Result<Registry, ApiError> {
        self.registry
            .read()
            .unwrap()
            .clone()
            .ok_or_else(|| ApiError::unavailable("no worker has reported its model registry yet"))
    }

    fn prepare(&self, req: &GenerationRequest, _out: OutputTarget) -> Result<JobFuture, ApiError> {
        // Same 404/400 answers a worker would give, before anything is queued.
        resolve(req, &self.registry()?)?;
        let table = Arc::clone(&self.table);
        let client = self.client.clone();
        let req = req.clone();
        Ok(Box::pin(async move { forward(&table, &client, &req).await }))
    }

    fn workers(&self) -> Option<Vec<WorkerRecord>> {
        Some(self.table.snapshot())
    }
}

/// At most two attempts on distinct workers. Client errors from a worker are
/// final; connection failures and 5xx answers move on to the next worker.
pub async fn forward(
    table: &WorkerTable,
    client: &reqwest::Client,
    req: &GenerationRequest,
) -> Result<Vec<String>, ApiError> {
    let mut tried = Vec::new();
    let mut last = String::new();
    for _ in 0..2 {
        let Some((id, addr)) = table.acquire(&tried) else {
            break;
        };
        tried.push(id);
        let sent = client.post(format!("http://{addr}/generate")).json(req).send().await;
        let resp = match sent {
            Ok(r) => r,
            Err(e) => {
                table.release(id, false);
                table.record_failure(id);
                last = format!("worker {id} at {addr} unreachable: {e}");
                tracing::warn!("{last}");
                continue;
            }
        };
        let status = resp.status().as_u16();
        match resp.json::<GenerationResult>().await {
            Ok(body) if body.success && (200..300).contains(&status) => {
                table.release(id, true);
                return Ok(body.images);
            }
            Ok(body) if (400..500).contains(&status) => {
                table.release(id, false);
                let code = StatusCode::from_u16(status).unwrap_or(StatusCode::BAD_REQUEST);
                return Err(ApiError::new(code, body.error.unwrap_or_default()));
            }
            Ok(body) => {
                table.release(id, false);
                last = format!("worker {id} answered {status}: {}", body.error.unwrap_or_default());
            }
            Err(e) => {
                table.release(id, false);
                table.record_failure(id);
                last = format!("worker {id} at {addr} dropped the response: {e}");
            }
        }
        tracing::warn!("{last}");
    }
    Err(ApiError::unavailable(if tried.is_empty() {
        "no healthy workers".to_string()
    } else {
        format!("dispatch failed: {last}")
    }))
}

/// Probes every worker once, concurrently. The first healthy worker also
/// supplies the model registry if the router has none yet.
pub async fn probe_all(router: &RouterBackend, timeout: Duration) {
    let mut set = JoinSet::new();
    for w in router.table.snapshot() {
        let client = router.client.clone();
        set.spawn(async move {
            let url = format!("http://{}/health", w.address);
            let r = async {
                client
                    .get(url)
                    .timeout(timeout)
                    .send()
                    .await?
                    .error_for_status()?
                    .json::<HealthReport>()
                    .await
            }
            .await;
            (w.worker_id, w.address, r)
        });
    }
    while let Some(joined) = set.join_next().await {
        let Ok((id, addr, r)) = joined else { continue };
        match r {
            Ok(h) => {
                router.table.record_success(id, h.in_flight + h.queue_depth);
                if !router.has_registry() {
                    if let Ok(models) = fetch_models(&router.client, &addr, timeout).await {
                        router.set_registry(Registry::new(models));
                    }
                }
            }
            Err(_) => router.table.record_failure(id),
        }
    }
}

async fn fetch_models(client: &reqwest::Client, addr: &str, timeout: Duration) -> reqwest::Result<Vec<RegistryEntry>> {
    client
        .get(format!("http://{addr}/models"))
        .timeout(timeout)
        .send()
        .await?
        .error_for_status()?
        .json()
        .await
}

/// Probes on a fixed period until the task is dropped.
pub async fn health_loop(router: Arc<RouterBackend>, interval: Duration, timeout: Duration) {
    let mut tick = tokio::time::interval(interval);
    tick.set_missed_tick_behavior(MissedTickBehavior::Delay);
    loop {
        tick.tick().await;
        probe_all(&router, timeout).await;
    }
}
