//! Bounded admission: at most `concurrency` jobs run and at most `queue_size`
//! wait; anything beyond that is refused up front.

use std::collections::VecDeque;
use std::future::Future;
use std::sync::{Arc, Mutex};

use tokio::sync::oneshot;

#[derive(Debug)]
pub struct Admission {
    concurrency: usize,
    queue_size: usize,
    state: Mutex<State>,
}

#[derive(Debug)]
struct State {
    outstanding: usize,
    running: usize,
    free: usize,
    /// Start grants go out strictly in admission order.
    waiting: VecDeque<oneshot::Sender<()>>,
}

impl Admission {
    pub fn new(concurrency: usize, queue_size: usize) -> Arc<Self> {
        let concurrency = concurrency.max(1);
        Arc::new(Self {
            concurrency,
            queue_size,
            state: Mutex::new(State {
                outstanding: 0,
                running: 0,
                free: concurrency,
                waiting: VecDeque::new(),
            }),
        })
    }

    pub fn concurrency(&self) -> usize {
        self.concurrency
    }

    pub fn queue_size(&self) -> usize {
        self.queue_size
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// A slot in the system, or `None` when `concurrency + queue_size` jobs
    /// are already admitted.
    pub fn try_admit(self: &Arc<Self>) -> Option<Ticket> {
        let mut st = self.lock();
        if st.outstanding >= self.concurrency + self.queue_size {
            return None;
        }
        st.outstanding += 1;
        let grant = if st.free > 0 {
            st.free -= 1;
            Grant::Held
        } else {
            let (tx, rx) = oneshot::channel();
            st.waiting.push_back(tx);
            Grant::Pending(rx)
        };
        Some(Ticket {
            adm: Arc::clone(self),
            grant,
        })
    }

    pub fn in_flight(&self) -> usize {
        self.lock().running
    }

    pub fn queue_depth(&self) -> usize {
        let st = self.lock();
        st.outstanding - st.running
    }

    /// Hands a freed run slot to the oldest live waiter.
    fn release_slot(&self, st: &mut State) {
        while let Some(tx) = st.waiting.pop_front() {
            if tx.send(()).is_ok() {
                return;
            }
        }
        st.free += 1;
    }
}

#[derive(Debug)]
enum Grant {
    Held,
    Pending(oneshot::Receiver<()>),
}

/// An admitted job. Dropping it releases the slot.
#[derive(Debug)]
pub struct Ticket {
    adm: Arc<Admission>,
    grant: Grant,
}

struct Running<'a>(&'a Admission);

impl Drop for Running<'_> {
    fn drop(&mut self) {
        self.0.lock().running -= 1;
    }
}

impl Ticket {
    /// Waits for a run slot, calls `on_start`, then drives `job`.
    pub async fn run<F: Future>(mut self, on_start: impl FnOnce(), job: F) -> F::Output {
        if let Grant::Pending(rx) = &mut self.grant {
            // The sender lives in the admission queue until it fires.
            rx.await.expect("grant sender is never dropped unsent");
            self.grant = Grant::Held;
        }
        self.adm.lock().running += 1;
        let _running = Running(&self.adm);
        on_start();
        job.await
    }
}

impl Drop for Ticket {
    fn drop(&mut self) {
        let holds = match &mut self.grant {
            Grant::Held => true,
            Grant::Pending(rx) => {
                rx.close();
                rx.try_recv().is_ok()
            }
        };
        let mut st = self.adm.lock();
        st.outstanding -= 1;
        if holds {
            self.adm.release_slot(&mut st);
        }
    }
}
