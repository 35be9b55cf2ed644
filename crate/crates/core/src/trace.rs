//! Timeline profiler: records enqueue/execute intervals on named lanes.
//!
//! The executor reports one `HostEnqueue` event per queued op (covering the
//! host-side work to validate, allocate, and queue it) and one `Stream(k)`
//! event for its execution on the worker standing in for the device. The
//! two share a correlation id so a viewer can pair them.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;
use std::time::Instant;

/// Which row of the timeline an event belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Lane {
    HostEnqueue,
    Stream(u64),
}

/// One interval on the timeline. Timestamps are microseconds since the
/// collector's epoch.
#[derive(Debug, Clone)]
pub struct TraceEvent {
    pub name: String,
    pub lane: Lane,
    pub ts_us: u64,
    pub dur_us: u64,
    pub correlation_id: u64,
}

/// Collects events from all threads. Disabled by default; enabling costs
/// one mutex acquisition per event.
pub struct TraceCollector {
    enabled: AtomicBool,
    epoch: Instant,
    events: Mutex<Vec<TraceEvent>>,
}

impl TraceCollector {
    pub fn new() -> Self {
        TraceCollector {
            enabled: AtomicBool::new(false),
            epoch: Instant::now(),
            events: Mutex::new(Vec::new()),
        }
    }

    pub fn set_enabled(&self, on: bool) {
        self.enabled.store(on, Ordering::Relaxed);
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled.load(Ordering::Relaxed)
    }

    /// Microseconds from the collector epoch to `t`.
    pub fn micros(&self, t: Instant) -> u64 {
        t.saturating_duration_since(self.epoch).as_micros() as u64
    }

    pub fn record(&self, event: TraceEvent) {
        if self.is_enabled() {
            self.events.lock().unwrap().push(event);
        }
    }

    /// Take all events recorded so far, merged in timestamp order.
    pub fn drain(&self) -> Vec<TraceEvent> {
        let mut events = std::mem::take(&mut *self.events.lock().unwrap());
        events.sort_by_key(|e| (e.ts_us, e.correlation_id));
        events
    }
}

impl Default for TraceCollector {
    fn default() -> Self {
        Self::new()
    }
}
