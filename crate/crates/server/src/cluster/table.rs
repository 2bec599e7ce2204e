use std::sync::Mutex;

use super::policy::{dispatch, WorkerRecord, WorkerStatus};
use crate::tasks::unix_ms;

/// Consecutive failed probes that mark a worker unhealthy.
pub const FAILURE_THRESHOLD: u32 = 2;

/// The router's worker table. Every mutation happens under one lock.
#[derive(Debug, Default)]
pub struct WorkerTable {
    inner: Mutex<Inner>,
}

#[derive(Debug, Default)]
struct Inner {
    workers: Vec<WorkerRecord>,
    next_id: usize,
}

impl WorkerTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, address: &str, status: WorkerStatus) -> usize {
        let mut g = self.inner.lock().unwrap();
        let id = g.next_id;
        g.next_id += 1;
        g.workers.push(WorkerRecord::new(id, address, status));
        id
    }

    pub fn remove(&self, worker_id: usize) -> Option<WorkerRecord> {
        let mut g = self.inner.lock().unwrap();
        let i = g.workers.iter().position(|w| w.worker_id == worker_id)?;
        Some(g.workers.remove(i))
    }

    pub fn snapshot(&self) -> Vec<WorkerRecord> {
        self.inner.lock().unwrap().workers.clone()
    }

    pub fn get(&self, worker_id: usize) -> Option<WorkerRecord> {
        self.inner
            .lock()
            .unwrap()
            .workers
            .iter()
            .find(|w| w.worker_id == worker_id)
            .cloned()
    }

    /// Picks a worker by [`dispatch`] among those not in `exclude` and counts
    /// the request against it.
    pub fn acquire(&self, exclude: &[usize]) -> Option<(usize, String)> {
        let mut g = self.inner.lock().unwrap();
        let candidates: Vec<WorkerRecord> = g
            .workers
            .iter()
            .filter(|w| !exclude.contains(&w.worker_id))
            .cloned()
            .collect();
        let id = dispatch(&candidates)?;
        let w = g.workers.iter_mut().find(|w| w.worker_id == id)?;
        w.in_flight += 1;
        Some((id, w.address.clone()))
    }

    pub fn release(&self, worker_id: usize, completed: bool) {
        self.with(worker_id, |w| {
            w.in_flight = w.in_flight.saturating_sub(1);
            if completed {
                w.total_completed += 1;
            }
        });
    }

    /// A failed probe or a failed connection.
    pub fn record_failure(&self, worker_id: usize) {
        self.with(worker_id, |w| {
            w.consecutive_failures += 1;
            if w.consecutive_failures >= FAILURE_THRESHOLD && w.status == WorkerStatus::Healthy {
                w.status = WorkerStatus::Unhealthy;
            }
        });
    }

    /// A successful probe: healthy again (unless draining) and the in-flight
    /// count taken from the worker's own report.
    pub fn record_success(&self, worker_id: usize, reported_in_flight: usize) {
        self.with(worker_id, |w| {
            w.consecutive_failures = 0;
            if w.status == WorkerStatus::Unhealthy {
                w.status = WorkerStatus::Healthy;
            }
            w.in_flight = reported_in_flight;
            w.last_heartbeat = Some(unix_ms());
        });
    }

    pub fn set_draining(&self, worker_id: usize) {
        self.with(worker_id, |w| w.status = WorkerStatus::Draining);
    }

    pub fn in_flight_total(&self) -> usize {
        self.inner.lock().unwrap().workers.iter().map(|w| w.in_flight).sum()
    }

    fn with(&self, worker_id: usize, f: impl FnOnce(&mut WorkerRecord)) {
        let mut g = self.inner.lock().unwrap();
        if let Some(w) = g.workers.iter_mut().find(|w| w.worker_id == worker_id) {
            f(w);
        }
    }
}
