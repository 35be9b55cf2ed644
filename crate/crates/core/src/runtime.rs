//! Runtime context: allocator + executor + profiler, wired together.
//!
//! Every tensor belongs to a [`Runtime`]; handles are cheap to clone and
//! tests get full isolation by creating their own. The per-thread pieces
//! of state (grad mode, current stream) live in thread-locals because they
//! describe the calling thread, not the runtime.

use crate::alloc::{CachingAllocator, RawBackend, SystemBackend, DEFAULT_QUANTUM};
use crate::error::Result;
use crate::stream::{ExecMode, StreamExecutor, StreamId};
use crate::trace::TraceCollector;
use std::cell::Cell;
use std::sync::Arc;

struct RuntimeInner {
    trace: Arc<TraceCollector>,
    executor: Arc<StreamExecutor>,
    allocator: Arc<CachingAllocator>,
}

/// Shared handle to one runtime instance.
#[derive(Clone)]
pub struct Runtime {
    inner: Arc<RuntimeInner>,
}

impl Runtime {
    /// Runtime over plain host memory with caching enabled.
    pub fn new() -> Self {
        Self::with_backend(Box::new(SystemBackend), true)
    }

    /// Runtime over a custom raw backend; `caching = false` makes the
    /// allocator a pass-through (comparison benchmarks).
    pub fn with_backend(backend: Box<dyn RawBackend>, caching: bool) -> Self {
        let trace = Arc::new(TraceCollector::new());
        let executor = Arc::new(StreamExecutor::new(trace.clone()));
        let allocator = Arc::new(CachingAllocator::with_config(
            backend,
            executor.clone(),
            DEFAULT_QUANTUM,
            caching,
        ));
        Runtime {
            inner: Arc::new(RuntimeInner {
                trace,
                executor,
                allocator,
            }),
        }
    }

    pub fn allocator(&self) -> &CachingAllocator {
        &self.inner.allocator
    }

    pub fn executor(&self) -> &StreamExecutor {
        &self.inner.executor
    }

    pub fn trace(&self) -> &TraceCollector {
        &self.inner.trace
    }

    pub fn mode(&self) -> ExecMode {
        self.inner.executor.mode()
    }

    pub fn set_mode(&self, mode: ExecMode) -> Result<()> {
        self.inner.executor.set_mode(mode)
    }

    /// Drain every stream.
    pub fn synchronize(&self) {
        self.inner.executor.synchronize(None);
    }

    pub fn same_as(&self, other: &Runtime) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }
}

impl Default for Runtime {
    fn default() -> Self {
        Self::new()
    }
}

thread_local! {
    static CURRENT_STREAM: Cell<u64> = const { Cell::new(0) };
}

/// Stream that ops issued from this thread target. Defaults to stream 0.
pub fn current_stream() -> StreamId {
    StreamId(CURRENT_STREAM.with(Cell::get))
}

/// Scoped override of the calling thread's current stream. Restores the
/// previous stream on drop.
pub struct StreamGuard {
    previous: u64,
}

impl StreamGuard {
    pub fn new(stream: StreamId) -> Self {
        let previous = CURRENT_STREAM.with(|c| c.replace(stream.0));
        StreamGuard { previous }
    }
}

impl Drop for StreamGuard {
    fn drop(&mut self) {
        CURRENT_STREAM.with(|c| c.set(self.previous));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stream_guard_nests_and_restores() {
        assert_eq!(current_stream(), StreamId(0));
        {
            let _g1 = StreamGuard::new(StreamId(3));
            assert_eq!(current_stream(), StreamId(3));
            {
                let _g2 = StreamGuard::new(StreamId(7));
                assert_eq!(current_stream(), StreamId(7));
            }
            assert_eq!(current_stream(), StreamId(3));
        }
        assert_eq!(current_stream(), StreamId(0));
    }
}
