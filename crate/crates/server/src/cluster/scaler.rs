use std::collections::HashMap;
use std::net::TcpListener;
use std::ops::RangeInclusive;
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use super::policy::{desired_workers, reconcile, CooldownState, ScalingPolicy, WorkerStatus};
use super::table::WorkerTable;
use crate::admission::Admission;

/// Starts and stops worker instances.
pub trait Spawner: Send + Sync {
    /// Address of a newly started worker.
    fn spawn(&self) -> std::io::Result<String>;
    fn terminate(&self, address: &str);
}

/// Runs workers as child processes of this binary in `--mode worker`, on the
/// first free port of a range.
pub struct ProcessSpawner {
    exe: PathBuf,
    host: String,
    ports: RangeInclusive<u16>,
    args: Vec<String>,
    children: Mutex<HashMap<String, Child>>,
}

impl ProcessSpawner {
    pub fn new(exe: PathBuf, host: &str, ports: RangeInclusive<u16>, args: Vec<String>) -> Self {
        Self {
            exe,
            host: host.to_string(),
            ports,
            args,
            children: Mutex::default(),
        }
    }
}

impl Spawner for ProcessSpawner {
    fn spawn(&self) -> std::io::Result<String> {
        let mut children = self.children.lock().unwrap();
        for port in self.ports.clone() {
            let addr = format!("{}:{port}", self.host);
            if children.contains_key(&addr) || TcpListener::bind(&addr).is_err() {
                continue;
            }
            let child = Command::new(&self.exe)
                .args(["--mode", "worker", "--host", &self.host, "--port", &port.to_string()])
                .args(&self.args)
                .stdin(Stdio::null())
                .stdout(Stdio::null())
                .spawn()?;
            tracing::info!(%addr, pid = child.id(), "spawned worker");
            children.insert(addr.clone(), child);
            return Ok(addr);
        }
        Err(std::io::Error::new(
            std::io::ErrorKind::AddrInUse,
            format!("no free port in {:?}", self.ports),
        ))
    }

    fn terminate(&self, address: &str) {
        if let Some(mut child) = self.children.lock().unwrap().remove(address) {
            let _ = child.kill();
            let _ = child.wait();
            tracing::info!(%address, "terminated worker");
        }
    }
}

impl Drop for ProcessSpawner {
    fn drop(&mut self) {
        for (_, mut child) in self.children.lock().unwrap().drain() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// Applies [`reconcile`] to the live table: spawns, marks workers draining,
/// and stops drained workers once they are idle.
pub struct Autoscaler {
    pub table: Arc<WorkerTable>,
    pub spawner: Arc<dyn Spawner>,
    pub policy: ScalingPolicy,
    pub admission: Arc<Admission>,
    cooldown: CooldownState,
    epoch: Instant,
}

impl Autoscaler {
    pub fn new(
        table: Arc<WorkerTable>,
        spawner: Arc<dyn Spawner>,
        policy: ScalingPolicy,
        admission: Arc<Admission>,
    ) -> Self {
        Self {
            table,
            spawner,
            policy,
            admission,
            cooldown: CooldownState::default(),
            epoch: Instant::now(),
        }
    }

    pub fn tick(&mut self) {
        for w in self.table.snapshot() {
            if w.status == WorkerStatus::Draining && w.in_flight == 0 {
                self.spawner.terminate(&w.address);
                self.table.remove(w.worker_id);
            }
        }
        let desired = desired_workers(self.admission.queue_depth(), self.table.in_flight_total(), &self.policy);
        let now = self.epoch.elapsed().as_secs_f64();
        let actions = reconcile(&self.table.snapshot(), desired, &self.cooldown, now, self.policy.cooldown_s);
        for _ in 0..actions.spawn {
            match self.spawner.spawn() {
                Ok(addr) => {
                    self.table.add(&addr, WorkerStatus::Unhealthy);
                }
                Err(e) => tracing::warn!("spawn failed: {e}"),
            }
        }
        for id in &actions.drain {
            self.table.set_draining(*id);
        }
        if let Some(dir) = actions.direction() {
            tracing::info!(?dir, desired, "scaling");
            self.cooldown.record(now, dir);
        }
    }

    pub async fn run(mut self, period: Duration) {
        let mut tick = tokio::time::interval(period);
        loop {
            tick.tick().await;
            self.tick();
        }
    }
}
