//! Use-counted, versioned storage behind tensor views.

use crate::alloc::Block;
use crate::memory::Memory;
use crate::runtime::{current_stream, Runtime};
use crate::stream::StreamId;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

type ReleaseCallback = Box<dyn FnOnce() + Send>;

enum Origin {
    /// Owned by the caching allocator; returned to it on last drop.
    Pooled(Block),
    /// Caller-owned memory wrapped without copying.
    External(Mutex<Option<ReleaseCallback>>),
}

struct StorageInner {
    runtime: Runtime,
    memory: Arc<Memory>,
    nbytes: usize,
    version: AtomicU64,
    stream_tag: AtomicU64,
    grad_leaf: AtomicBool,
    origin: Origin,
}

impl Drop for StorageInner {
    fn drop(&mut self) {
        match &self.origin {
            // Immediate return to the cache: no deferred collection. Any
            // kernel still queued against this storage holds its own
            // handle, so reaching this point means no device work is
            // outstanding.
            Origin::Pooled(block) => {
                let _ = self.runtime.allocator().free(block);
            }
            Origin::External(cb) => {
                if let Some(cb) = cb.lock().unwrap().take() {
                    cb();
                }
            }
        }
    }
}

/// Shared handle to a storage. The use count is the number of live handles
/// (tensor views, saved tensors, queued kernels); the buffer goes back to
/// the allocator the moment it reaches zero.
#[derive(Clone)]
pub struct Storage {
    inner: Arc<StorageInner>,
}

impl Storage {
    /// Allocate `nbytes` from the runtime's caching allocator on the
    /// calling thread's current stream.
    pub fn new_pooled(runtime: &Runtime, nbytes: usize) -> crate::error::Result<Storage> {
        let stream = current_stream();
        let block = runtime.allocator().allocate(nbytes, stream)?;
        Ok(Storage {
            inner: Arc::new(StorageInner {
                runtime: runtime.clone(),
                memory: block.memory().clone(),
                nbytes,
                version: AtomicU64::new(0),
                stream_tag: AtomicU64::new(stream.0),
                grad_leaf: AtomicBool::new(false),
                origin: Origin::Pooled(block),
            }),
        })
    }

    /// Wrap caller-owned memory. No copy; `release` fires exactly once,
    /// when the last handle drops.
    pub fn new_external(
        runtime: &Runtime,
        memory: Arc<Memory>,
        nbytes: usize,
        release: Option<ReleaseCallback>,
    ) -> Storage {
        Storage {
            inner: Arc::new(StorageInner {
                runtime: runtime.clone(),
                memory,
                nbytes,
                version: AtomicU64::new(0),
                stream_tag: AtomicU64::new(current_stream().0),
                grad_leaf: AtomicBool::new(false),
                origin: Origin::External(Mutex::new(release)),
            }),
        }
    }

    pub fn runtime(&self) -> &Runtime {
        &self.inner.runtime
    }

    pub fn memory(&self) -> &Arc<Memory> {
        &self.inner.memory
    }

    pub fn nbytes(&self) -> usize {
        self.inner.nbytes
    }

    /// Number of live handles to this storage.
    pub fn use_count(&self) -> usize {
        Arc::strong_count(&self.inner)
    }

    /// Mutation counter. Incremented exactly once per in-place op on any
    /// view of this storage.
    pub fn version(&self) -> u64 {
        self.inner.version.load(Ordering::Acquire)
    }

    pub fn bump_version(&self) -> u64 {
        self.inner.version.fetch_add(1, Ordering::AcqRel) + 1
    }

    /// Stream of the last recorded use.
    pub fn stream_tag(&self) -> StreamId {
        StreamId(self.inner.stream_tag.load(Ordering::Relaxed))
    }

    /// Note a use on `stream`; cross-stream uses are reported to the
    /// allocator so the block is not reused until that stream catches up.
    pub fn record_use(&self, stream: StreamId) {
        self.inner.stream_tag.store(stream.0, Ordering::Relaxed);
        if let Origin::Pooled(block) = &self.inner.origin {
            if stream != block.home_stream() {
                self.inner.runtime.allocator().record_stream(block, stream);
            }
        }
    }

    /// True when a leaf tensor with `requires_grad` views this storage.
    pub fn is_grad_leaf(&self) -> bool {
        self.inner.grad_leaf.load(Ordering::Relaxed)
    }

    pub fn mark_grad_leaf(&self) {
        self.inner.grad_leaf.store(true, Ordering::Relaxed);
    }

    pub fn ptr_eq(&self, other: &Storage) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    /// Stable identity for deduplication (parameter lists).
    pub fn id(&self) -> usize {
        Arc::as_ptr(&self.inner) as usize
    }
}

impl std::fmt::Debug for Storage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Storage")
            .field("nbytes", &self.inner.nbytes)
            .field("version", &self.version())
            .field("use_count", &self.use_count())
            .finish()
    }
}
