//! Task records for the asynchronous API, kept for a TTL after they finish.

use std::collections::HashMap;
use std::sync::Mutex;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use crate::schema::{GenerationResult, TaskRecord, TaskStatus};

pub const DEFAULT_TTL: Duration = Duration::from_secs(600);

pub fn unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

pub fn new_internal_id() -> String {
    uuid::Uuid::new_v4().simple().to_string()
}

struct Entry {
    record: TaskRecord,
    finished: Option<Instant>,
}

pub struct TaskStore {
    ttl: Duration,
    entries: Mutex<HashMap<String, Entry>>,
}

impl TaskStore {
    pub fn new(ttl: Duration) -> Self {
        Self {
            ttl,
            entries: Mutex::new(HashMap::new()),
        }
    }

    pub fn ttl(&self) -> Duration {
        self.ttl
    }

    /// New queued record under the internal id `id`.
    pub fn create(&self, id: &str, client_task_id: &str) -> TaskRecord {
        let record = TaskRecord {
            id: id.to_string(),
            task_id: client_task_id.to_string(),
            status: TaskStatus::Queued,
            submitted_at: unix_ms(),
            finished_at: None,
            result: None,
        };
        self.entries.lock().unwrap().insert(
            record.id.clone(),
            Entry {
                record: record.clone(),
                finished: None,
            },
        );
        record
    }

    /// Moves a record forward; out-of-order moves are ignored.
    pub fn advance(&self, id: &str, status: TaskStatus, result: Option<GenerationResult>) -> bool {
        let mut entries = self.entries.lock().unwrap();
        let Some(e) = entries.get_mut(id) else {
            return false;
        };
        if !e.record.status.can_become(status) {
            return false;
        }
        e.record.status = status;
        if status.is_terminal() {
            e.record.finished_at = Some(unix_ms());
            e.record.result = result;
            e.finished = Some(Instant::now());
        }
        true
    }

    /// The record, unless it finished more than a TTL ago. Never mutates.
    pub fn get(&self, id: &str) -> Option<TaskRecord> {
        let entries = self.entries.lock().unwrap();
        let e = entries.get(id)?;
        if self.expired(e, Instant::now()) {
            return None;
        }
        Some(e.record.clone())
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops expired records; returns how many went.
    pub fn purge(&self) -> usize {
        let now = Instant::now();
        let mut entries = self.entries.lock().unwrap();
        let before = entries.len();
        entries.retain(|_, e| !self.expired(e, now));
        before - entries.len()
    }

    fn expired(&self, e: &Entry, now: Instant) -> bool {
        e.finished.is_some_and(|f| now.duration_since(f) >= self.ttl)
    }
}
