//! Virtual-stream execution engine.
//!
//! Each stream is a FIFO work queue drained by one dedicated worker thread,
//! standing in for a device hardware queue. The host enqueues kernels and
//! keeps running; `to_host` and friends synchronize when results are
//! actually needed. Cross-stream ordering goes through [`Event`]s, exactly
//! like the device events the allocator relies on.
//!
//! In [`ExecMode::Sync`] every kernel runs inline on the calling thread
//! before `enqueue` returns. Observable numeric results are identical in
//! both modes; only timing differs.

mod executor;

pub use executor::{StreamExecutor, WorkBuilder, WorkItem};

use std::sync::{Arc, Condvar, Mutex};

/// Identifies one FIFO work queue. Stream 0 is the default stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StreamId(pub u64);

impl StreamId {
    pub const DEFAULT: StreamId = StreamId(0);
}

impl std::fmt::Display for StreamId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "s{}", self.0)
    }
}

/// Execution mode of the runtime.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Sync,
    Async,
}

/// A completion marker on a stream. Once complete, every work item enqueued
/// on its stream before the record point has executed. Completion is
/// monotone: it never goes back to pending.
#[derive(Debug, Clone)]
pub struct Event {
    inner: Arc<EventInner>,
}

#[derive(Debug)]
struct EventInner {
    id: u64,
    recorded_on: StreamId,
    state: Mutex<bool>,
    cv: Condvar,
}

impl Event {
    /// A pending event. The executor (or a test harness) completes it.
    pub fn new(id: u64, recorded_on: StreamId) -> Self {
        Event {
            inner: Arc::new(EventInner {
                id,
                recorded_on,
                state: Mutex::new(false),
                cv: Condvar::new(),
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn recorded_on(&self) -> StreamId {
        self.inner.recorded_on
    }

    pub fn is_complete(&self) -> bool {
        *self.inner.state.lock().unwrap()
    }

    /// Mark complete and wake waiters. Idempotent.
    pub fn mark_complete(&self) {
        let mut done = self.inner.state.lock().unwrap();
        *done = true;
        self.inner.cv.notify_all();
    }

    /// Block the calling thread until the event completes.
    pub fn wait(&self) {
        let mut done = self.inner.state.lock().unwrap();
        while !*done {
            done = self.inner.cv.wait(done).unwrap();
        }
    }
}

/// The slice of executor behavior the allocator needs: recording events on
/// streams and draining all queues. Kept as a trait so allocator tests can
/// use a hand-driven mock.
pub trait StreamSync: Send + Sync {
    fn record_event(&self, stream: StreamId) -> Event;
    fn synchronize_all(&self);
}
