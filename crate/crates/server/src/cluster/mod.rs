//! Router mode: a worker table, least-loaded dispatch with one retry, health
//! probing and an elastic scaling policy over local worker processes.

mod policy;
mod router;
mod scaler;
mod table;

use std::path::Path;
use std::time::Duration;

use serde::Deserialize;

pub use policy::{
    desired_workers, dispatch, reconcile, CooldownState, ScaleActions, ScaleDirection, ScalingPolicy, WorkerRecord,
    WorkerStatus,
};
pub use router::{forward, health_loop, probe_all, RouterBackend};
pub use scaler::{Autoscaler, ProcessSpawner, Spawner};
pub use table::{WorkerTable, FAILURE_THRESHOLD};

/// The router's config file (TOML).
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    /// Workers started elsewhere, as `host:port`.
    #[serde(default)]
    pub workers: Vec<String>,
    /// Spawn and stop local workers according to `policy`.
    #[serde(default)]
    pub autoscale: bool,
    #[serde(default = "default_host")]
    pub worker_host: String,
    #[serde(default = "default_port_start")]
    pub worker_port_start: u16,
    #[serde(default = "default_port_end")]
    pub worker_port_end: u16,
    /// Extra flags for spawned workers, e.g. `["--concurrency", "2"]`.
    #[serde(default)]
    pub worker_args: Vec<String>,
    #[serde(default = "default_interval")]
    pub health_interval_s: f64,
    #[serde(default = "default_timeout")]
    pub probe_timeout_s: f64,
    #[serde(default)]
    pub policy: ScalingPolicy,
}

fn default_host() -> String {
    "127.0.0.1".into()
}

fn default_port_start() -> u16 {
    9100
}

fn default_port_end() -> u16 {
    9199
}

fn default_interval() -> f64 {
    1.0
}

fn default_timeout() -> f64 {
    0.5
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            workers: Vec::new(),
            autoscale: false,
            worker_host: default_host(),
            worker_port_start: default_port_start(),
            worker_port_end: default_port_end(),
            worker_args: Vec::new(),
            health_interval_s: default_interval(),
            probe_timeout_s: default_timeout(),
            policy: ScalingPolicy::default(),
        }
    }
}

impl ClusterConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let c: Self = toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.policy.validate()?;
        if self.worker_port_start > self.worker_port_end {
            return Err(format!(
                "empty worker port range {}..={}",
                self.worker_port_start, self.worker_port_end
            ));
        }
        for (name, v) in [("health_interval_s", self.health_interval_s), ("probe_timeout_s", self.probe_timeout_s)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{name} must be positive, got {v}"));
            }
        }
        if !self.autoscale && self.workers.is_empty() {
            return Err("no static workers and autoscale disabled: nothing to route to".into());
        }
        Ok(())
    }

    pub fn health_interval(&self) -> Duration {
        Duration::from_secs_f64(self.health_interval_s)
    }

    pub fn probe_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.probe_timeout_s)
    }
}
