//! Shared fixtures: a toy zoo on disk, in-process servers, stub worker
//! processes and a small HTTP helper.
#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use serde_json::{json, Value};

use diffserve_core::pipelines::{OptimizationConfig, to_png_base64};
use diffserve_core::Tensor;
use diffserve_server::backend::{LocalBackend, StubBackend, StubStats};
use diffserve_server::cluster::{health_loop, probe_all, RouterBackend, WorkerStatus, WorkerTable};
use diffserve_server::{zoo, AppState, Mode, RunningServer, ServerConfig};

pub fn zoo_dir() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let d = tempfile::tempdir().unwrap();
        zoo::init(d.path(), 0).unwrap();
        d
    })
    .path()
}

pub fn config(concurrency: usize, queue_size: usize) -> ServerConfig {
    ServerConfig {
        concurrency,
        queue_size,
        output_dir: tempfile::tempdir().unwrap().keep(),
        ..ServerConfig::default()
    }
}

pub async fn local_server(cfg: ServerConfig) -> RunningServer {
    let backend = LocalBackend::open(zoo_dir(), OptimizationConfig::all_on()).unwrap();
    RunningServer::start(AppState::new(Arc::new(backend), cfg)).await.unwrap()
}

pub async fn stub_server(latency: Duration, cfg: ServerConfig) -> (RunningServer, Arc<StubStats>) {
    let stub = StubBackend::new("inproc", latency);
    let stats = stub.stats();
    (RunningServer::start(AppState::new(Arc::new(stub), cfg)).await.unwrap(), stats)
}

/// The published sample body, at the toy default size.
pub fn sample_request() -> Value {
    json!({
        "task_id": "1",
        "prompt": "romantic starry sky",
        "negative_prompt": "noise, low-quality",
        "func_name": "t2i",
        "steps": 25,
        "image_num": 1,
        "width": 64,
        "height": 64,
        "use_base64": true
    })
}

/// Small, fast request for tests that only need some image.
pub fn quick_request(task_id: &str) -> Value {
    json!({
        "task_id": task_id,
        "prompt": "a red house",
        "func_name": "t2i",
        "steps": 3,
        "width": 32,
        "height": 32,
        "seed": 7
    })
}

pub fn client() -> reqwest::Client {
    reqwest::Client::builder().timeout(Duration::from_secs(120)).build().unwrap()
}

pub async fn post(c: &reqwest::Client, url: &str, body: &Value) -> (u16, Value) {
    let r = c.post(url).json(body).send().await.unwrap();
    let status = r.status().as_u16();
    (status, r.json().await.unwrap())
}

/// Posts `n` quick requests at once, ids `{prefix}{i}`.
pub async fn burst(c: &reqwest::Client, url: &str, n: usize, prefix: &str) -> Vec<(u16, Value)> {
    let mut set = tokio::task::JoinSet::new();
    for i in 0..n {
        let (c, url, id) = (c.clone(), url.to_string(), format!("{prefix}{i}"));
        set.spawn(async move { post(&c, &url, &quick_request(&id)).await });
    }
    set.join_all().await
}

pub async fn get(c: &reqwest::Client, url: &str) -> (u16, Value) {
    let r = c.get(url).send().await.unwrap();
    let status = r.status().as_u16();
    (status, r.json().await.unwrap())
}

pub fn png_of(img: &Tensor) -> String {
    to_png_base64(img).unwrap()
}

pub fn gradient_image(h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[3, h, w], |i| {
        let p = i % (h * w);
        ((p % w) as f32 / w as f32) * 2.0 - 1.0
    })
}

/// White where `x >= w / 2`.
pub fn half_mask(h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[3, h, w], |i| if (i % (h * w)) % w >= w / 2 { 1.0 } else { -1.0 })
}

/// A `diffserve --mode worker` process with the stub backend.
pub struct WorkerProc {
    pub child: Child,
    pub addr: String,
}

impl WorkerProc {
    pub fn spawn(latency_ms: u64, concurrency: usize, queue_size: usize) -> Self {
        let mut child = Command::new(env!("CARGO_BIN_EXE_diffserve"))
            .args(["--mode", "worker", "--port", "0"])
            .args(["--stub-latency-ms", &latency_ms.to_string()])
            .args(["--concurrency", &concurrency.to_string()])
            .args(["--queue-size", &queue_size.to_string()])
            .env("DIFFSERVE_LOG", "error")
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        let addr = line.trim().strip_prefix("listening on ").expect("worker banner").to_string();
        Self { child, addr }
    }

    pub fn kill(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for WorkerProc {
    fn drop(&mut self) {
        self.kill();
    }
}

/// In-process router over already-running workers, probing every `interval`.
pub struct Router {
    pub server: RunningServer,
    pub backend: Arc<RouterBackend>,
    health: tokio::task::JoinHandle<()>,
}

impl Router {
    pub async fn start(addrs: &[String], interval: Duration, timeout: Duration) -> Self {
        let table = Arc::new(WorkerTable::new());
        for a in addrs {
            table.add(a, WorkerStatus::Unhealthy);
        }
        let backend = RouterBackend::new(table);
        probe_all(&backend, timeout).await;
        let cfg = ServerConfig {
            mode: Mode::Router,
            ..config(256, 1024)
        };
        let server = RunningServer::start(AppState::new(backend.clone(), cfg)).await.unwrap();
        let health = tokio::spawn(health_loop(backend.clone(), interval, timeout));
        Self { server, backend, health }
    }

    pub fn table(&self) -> &WorkerTable {
        self.backend.table()
    }
}

impl Drop for Router {
    fn drop(&mut self) {
        self.health.abort();
    }
}
