//! Pure routing and scaling decisions over a snapshot of the worker table.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkerStatus {
    Healthy,
    Unhealthy,
    Draining,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerRecord {
    pub worker_id: usize,
    /// `host:port`.
    pub address: String,
    pub status: WorkerStatus,
    pub in_flight: usize,
    /// Unix ms of the last successful probe.
    pub last_heartbeat: Option<u64>,
    pub total_completed: u64,
    #[serde(default)]
    pub consecutive_failures: u32,
}

impl WorkerRecord {
    pub fn new(worker_id: usize, address: &str, status: WorkerStatus) -> Self {
        Self {
            worker_id,
            address: address.to_string(),
            status,
            in_flight: 0,
            last_heartbeat: None,
            total_completed: 0,
            consecutive_failures: 0,
        }
    }
}

/// Healthy worker with the fewest requests in flight, lowest id on ties.
pub fn dispatch(workers: &[WorkerRecord]) -> Option<usize> {
    workers
        .iter()
        .filter(|w| w.status == WorkerStatus::Healthy)
        .min_by_key(|w| (w.in_flight, w.worker_id))
        .map(|w| w.worker_id)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingPolicy {
    #[serde(default = "default_target")]
    pub target_per_worker: usize,
    pub min_workers: usize,
    pub max_workers: usize,
    #[serde(default = "default_cooldown")]
    pub cooldown_s: f64,
}

fn default_target() -> usize {
    2
}

fn default_cooldown() -> f64 {
    10.0
}

impl Default for ScalingPolicy {
    fn default() -> Self {
        Self {
            target_per_worker: default_target(),
            min_workers: 1,
            max_workers: 4,
            cooldown_s: default_cooldown(),
        }
    }
}

impl ScalingPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if self.target_per_worker == 0 {
            return Err("target_per_worker must be >= 1".into());
        }
        if self.min_workers == 0 || self.min_workers > self.max_workers {
            return Err(format!(
                "need 1 <= min_workers <= max_workers, got {} and {}",
                self.min_workers, self.max_workers
            ));
        }
        if !(self.cooldown_s >= 0.0 && self.cooldown_s.is_finite()) {
            return Err(format!("cooldown_s must be finite and >= 0, got {}", self.cooldown_s));
        }
        Ok(())
    }
}

/// `clamp(ceil((queue_depth + in_flight_total) / target), min, max)`.
pub fn desired_workers(queue_depth: usize, in_flight_total: usize, policy: &ScalingPolicy) -> usize {
    let demand = (queue_depth + in_flight_total).div_ceil(policy.target_per_worker.max(1));
    demand.clamp(policy.min_workers, policy.max_workers)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScaleDirection {
    Up,
    Down,
}

/// The last scaling action, in seconds on the caller's clock.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CooldownState {
    pub last: Option<(f64, ScaleDirection)>,
}

impl CooldownState {
    pub fn record(&mut self, now_s: f64, dir: ScaleDirection) {
        self.last = Some((now_s, dir));
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScaleActions {
    pub spawn: usize,
    pub drain: Vec<usize>,
}

impl ScaleActions {
    pub fn is_empty(&self) -> bool {
        self.spawn == 0 && self.drain.is_empty()
    }

    pub fn direction(&self) -> Option<ScaleDirection> {
        if self.spawn > 0 {
            Some(ScaleDirection::Up)
        } else if !self.drain.is_empty() {
            Some(ScaleDirection::Down)
        } else {
            None
        }
    }
}

/// Moves the non-draining worker count toward `desired`. Within `cooldown_s`
/// of the last action, only the same direction is allowed. Scale-down drains
/// the least-loaded workers, newest first among equals.
pub fn reconcile(
    workers: &[WorkerRecord],
    desired: usize,
    cooldown: &CooldownState,
    now_s: f64,
    cooldown_s: f64,
) -> ScaleActions {
    let active: Vec<&WorkerRecord> = workers.iter().filter(|w| w.status != WorkerStatus::Draining).collect();
    let current = active.len();
    let dir = match desired.cmp(&current) {
        std::cmp::Ordering::Equal => return ScaleActions::default(),
        std::cmp::Ordering::Greater => ScaleDirection::Up,
        std::cmp::Ordering::Less => ScaleDirection::Down,
    };
    if let Some((t, last)) = cooldown.last {
        if now_s - t < cooldown_s && last != dir {
            return ScaleActions::default();
        }
    }
    match dir {
        ScaleDirection::Up => ScaleActions {
            spawn: desired - current,
            drain: Vec::new(),
        },
        ScaleDirection::Down => {
            let mut by_load = active;
            by_load.sort_by_key(|w| (w.in_flight, std::cmp::Reverse(w.worker_id)));
            ScaleActions {
                spawn: 0,
                drain: by_load.iter().take(current - desired).map(|w| w.worker_id).collect(),
            }
        }
    }
}
