use std::cell::RefCell;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("freed {freed} bytes with only {live} bytes live")]
pub struct AccountingError {
    pub freed: usize,
    pub live: usize,
}

/// High-water mark of live tensor bytes.
///
/// Tensors remember the tracker that saw their allocation and report their
/// release to the same tracker, so counters stay per-generation even when a
/// tensor is dropped on another thread.
#[derive(Debug, Default)]
pub struct AllocTracker {
    live: AtomicUsize,
    peak: AtomicUsize,
    window_peak: AtomicUsize,
    total_allocs: AtomicUsize,
    corrupted: AtomicBool,
}

thread_local! {
    static CURRENT: RefCell<Option<Arc<AllocTracker>>> = const { RefCell::new(None) };
}

impl AllocTracker {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn track_alloc(&self, bytes: usize) {
        let live = self.live.fetch_add(bytes, Ordering::Relaxed) + bytes;
        self.peak.fetch_max(live, Ordering::Relaxed);
        self.window_peak.fetch_max(live, Ordering::Relaxed);
        self.total_allocs.fetch_add(1, Ordering::Relaxed);
    }

    pub fn track_free(&self, bytes: usize) -> Result<(), AccountingError> {
        let mut live = self.live.load(Ordering::Relaxed);
        loop {
            if bytes > live {
                self.corrupted.store(true, Ordering::Relaxed);
                return Err(AccountingError { freed: bytes, live });
            }
            match self.live.compare_exchange_weak(
                live,
                live - bytes,
                Ordering::Relaxed,
                Ordering::Relaxed,
            ) {
                Ok(_) => return Ok(()),
                Err(actual) => live = actual,
            }
        }
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::Relaxed)
    }

    pub fn live(&self) -> usize {
        self.live.load(Ordering::Relaxed)
    }

    pub fn allocation_count(&self) -> usize {
        self.total_allocs.load(Ordering::Relaxed)
    }

    /// True once a free has exceeded live bytes.
    pub fn is_corrupted(&self) -> bool {
        self.corrupted.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.live.store(0, Ordering::Relaxed);
        self.peak.store(0, Ordering::Relaxed);
        self.window_peak.store(0, Ordering::Relaxed);
        self.total_allocs.store(0, Ordering::Relaxed);
        self.corrupted.store(false, Ordering::Relaxed);
    }

    /// Starts a measurement window whose peak begins at the current live size.
    pub fn begin_window(&self) {
        self.window_peak
            .store(self.live.load(Ordering::Relaxed), Ordering::Relaxed);
    }

    pub fn window_peak(&self) -> usize {
        self.window_peak.load(Ordering::Relaxed)
    }

    pub fn current() -> Option<Arc<AllocTracker>> {
        CURRENT.with(|c| c.borrow().clone())
    }

    /// Installs `tracker` for tensors allocated on this thread until the guard drops.
    pub fn enter(tracker: &Arc<AllocTracker>) -> AllocScope {
        let previous = CURRENT.with(|c| c.borrow_mut().replace(tracker.clone()));
        AllocScope { previous }
    }
}

pub struct AllocScope {
    previous: Option<Arc<AllocTracker>>,
}

impl Drop for AllocScope {
    fn drop(&mut self) {
        let previous = self.previous.take();
        CURRENT.with(|c| *c.borrow_mut() = previous);
    }
}
