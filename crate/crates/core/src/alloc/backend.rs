//! Raw memory backends behind the caching layer.

use crate::memory::Memory;
use crate::stream::StreamSync;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

/// Source of raw memory regions. `raw_alloc` returns `None` when the
/// backend is out of memory; the allocator then flushes its cache and
/// retries once.
pub trait RawBackend: Send + Sync {
    fn raw_alloc(&self, nbytes: usize) -> Option<Arc<Memory>>;
    fn raw_free(&self, region: Arc<Memory>);
}

impl<T: RawBackend + ?Sized> RawBackend for Arc<T> {
    fn raw_alloc(&self, nbytes: usize) -> Option<Arc<Memory>> {
        (**self).raw_alloc(nbytes)
    }

    fn raw_free(&self, region: Arc<Memory>) {
        (**self).raw_free(region)
    }
}

/// Plain host-memory backend with no artificial cost.
pub struct SystemBackend;

impl RawBackend for SystemBackend {
    fn raw_alloc(&self, nbytes: usize) -> Option<Arc<Memory>> {
        Some(Arc::new(Memory::new(nbytes)))
    }

    fn raw_free(&self, region: Arc<Memory>) {
        drop(region);
    }
}

/// Simulated device backend. Faithful to the hazard model of a real driver:
/// `raw_free` blocks until all queued work on all streams completes, and
/// both calls can carry injected latency (busy-wait, so microsecond values
/// stay accurate).
pub struct SimBackend {
    latency: Duration,
    capacity: Option<usize>,
    held: AtomicUsize,
    sync: Option<Arc<dyn StreamSync>>,
}

impl SimBackend {
    pub fn new(latency: Duration) -> Self {
        SimBackend {
            latency,
            capacity: None,
            held: AtomicUsize::new(0),
            sync: None,
        }
    }

    /// Fail `raw_alloc` once more than `bytes` are outstanding.
    pub fn with_capacity(mut self, bytes: usize) -> Self {
        self.capacity = Some(bytes);
        self
    }

    /// Make `raw_free` drain every stream first.
    pub fn with_stream_sync(mut self, sync: Arc<dyn StreamSync>) -> Self {
        self.sync = Some(sync);
        self
    }

    /// Bytes currently handed out and not yet returned.
    pub fn held_bytes(&self) -> usize {
        self.held.load(Ordering::SeqCst)
    }

    fn spin(&self) {
        if self.latency.is_zero() {
            return;
        }
        let start = Instant::now();
        while start.elapsed() < self.latency {
            std::hint::spin_loop();
        }
    }
}

impl RawBackend for SimBackend {
    fn raw_alloc(&self, nbytes: usize) -> Option<Arc<Memory>> {
        self.spin();
        let actual = nbytes.div_ceil(8) * 8; // Memory rounds to whole words
        if let Some(cap) = self.capacity {
            // optimistic claim, rolled back on failure
            let claimed = self.held.fetch_add(actual, Ordering::SeqCst) + actual;
            if claimed > cap {
                self.held.fetch_sub(actual, Ordering::SeqCst);
                return None;
            }
        } else {
            self.held.fetch_add(actual, Ordering::SeqCst);
        }
        Some(Arc::new(Memory::new(nbytes)))
    }

    fn raw_free(&self, region: Arc<Memory>) {
        if let Some(sync) = &self.sync {
            sync.synchronize_all();
        }
        self.spin();
        self.held.fetch_sub(region.nbytes(), Ordering::SeqCst);
        drop(region);
    }
}
