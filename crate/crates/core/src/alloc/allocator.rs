//! The caching allocator proper.

use super::{round_size_to, RawBackend, DEFAULT_QUANTUM};
use crate::error::{Error, Result};
use crate::memory::Memory;
use crate::stream::{Event, StreamId, StreamSync};
use serde::Serialize;
use std::collections::{BTreeSet, HashMap};
use std::sync::{Arc, Mutex};

/// Lifecycle of a block as seen by the allocator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockState {
    InUse,
    Cached,
}

/// Handle to one allocation. Cloning the handle does not duplicate the
/// memory; the allocator tracks checkout state by id.
#[derive(Clone)]
pub struct Block {
    id: u64,
    requested_bytes: usize,
    rounded_bytes: usize,
    home_stream: StreamId,
    memory: Arc<Memory>,
}

impl Block {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn requested_bytes(&self) -> usize {
        self.requested_bytes
    }

    pub fn rounded_bytes(&self) -> usize {
        self.rounded_bytes
    }

    pub fn home_stream(&self) -> StreamId {
        self.home_stream
    }

    pub fn memory(&self) -> &Arc<Memory> {
        &self.memory
    }
}

impl std::fmt::Debug for Block {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Block")
            .field("id", &self.id)
            .field("requested", &self.requested_bytes)
            .field("rounded", &self.rounded_bytes)
            .field("home", &self.home_stream)
            .finish()
    }
}

/// Snapshot of allocator counters. Counters are monotone; byte gauges
/// satisfy `bytes_in_use + bytes_cached == bytes held from the backend`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct AllocStats {
    pub raw_alloc_count: u64,
    pub raw_free_count: u64,
    pub cache_hit_count: u64,
    pub bytes_in_use: usize,
    pub bytes_cached: usize,
    pub peak_bytes_in_use: usize,
}

struct PooledBlock {
    memory: Arc<Memory>,
}

/// Per-stream cache: LIFO free lists keyed by rounded size.
struct Pool {
    free_lists: HashMap<usize, Vec<PooledBlock>>,
}

impl Pool {
    fn new() -> Self {
        Pool {
            free_lists: HashMap::new(),
        }
    }
}

struct InUseMeta {
    rounded_bytes: usize,
    home_stream: StreamId,
    extra_use_streams: BTreeSet<StreamId>,
    memory: Arc<Memory>,
}

/// A freed block waiting for cross-stream events before it may be pooled.
struct DeferredBlock {
    rounded_bytes: usize,
    home_stream: StreamId,
    memory: Arc<Memory>,
    events: Vec<Event>,
}

struct Inner {
    pools: HashMap<StreamId, Pool>,
    in_use: HashMap<u64, InUseMeta>,
    deferred: Vec<DeferredBlock>,
    stats: AllocStats,
    next_id: u64,
}

impl Inner {
    /// Move deferred blocks whose events have all completed into their
    /// home pools. Non-blocking.
    fn sweep_deferred(&mut self) {
        let mut i = 0;
        while i < self.deferred.len() {
            if self.deferred[i].events.iter().all(Event::is_complete) {
                let d = self.deferred.swap_remove(i);
                self.stats.bytes_in_use -= d.rounded_bytes;
                self.stats.bytes_cached += d.rounded_bytes;
                self.pools
                    .entry(d.home_stream)
                    .or_insert_with(Pool::new)
                    .free_lists
                    .entry(d.rounded_bytes)
                    .or_default()
                    .push(PooledBlock { memory: d.memory });
            } else {
                i += 1;
            }
        }
    }
}

/// Size-class caching allocator with one pool per stream.
pub struct CachingAllocator {
    inner: Mutex<Inner>,
    backend: Box<dyn RawBackend>,
    sync: Arc<dyn StreamSync>,
    quantum: usize,
    caching: bool,
}

impl CachingAllocator {
    pub fn new(backend: Box<dyn RawBackend>, sync: Arc<dyn StreamSync>) -> Self {
        Self::with_config(backend, sync, DEFAULT_QUANTUM, true)
    }

    /// `quantum` sets the rounding granule; `caching = false` degrades the
    /// allocator to a pass-through over the raw backend (for comparison
    /// benchmarks).
    pub fn with_config(
        backend: Box<dyn RawBackend>,
        sync: Arc<dyn StreamSync>,
        quantum: usize,
        caching: bool,
    ) -> Self {
        assert!(quantum > 0);
        CachingAllocator {
            inner: Mutex::new(Inner {
                pools: HashMap::new(),
                in_use: HashMap::new(),
                deferred: Vec::new(),
                stats: AllocStats::default(),
                next_id: 0,
            }),
            backend,
            sync,
            quantum,
            caching,
        }
    }

    /// Smallest multiple of the quantum covering `nbytes`.
    pub fn round_size(&self, nbytes: usize) -> usize {
        round_size_to(nbytes, self.quantum)
    }

    /// Check out a block of at least `nbytes` bytes for use on `stream`.
    /// An exact-rounded-size block cached on the same stream is reused
    /// without touching the backend.
    pub fn allocate(&self, nbytes: usize, stream: StreamId) -> Result<Block> {
        let rounded = self.round_size(nbytes);
        {
            let mut inner = self.inner.lock().unwrap();
            inner.sweep_deferred();
            if self.caching {
                let hit = inner
                    .pools
                    .get_mut(&stream)
                    .and_then(|pool| pool.free_lists.get_mut(&rounded))
                    .and_then(Vec::pop);
                if let Some(pooled) = hit {
                    inner.stats.cache_hit_count += 1;
                    inner.stats.bytes_cached -= rounded;
                    return Ok(self.check_out(&mut inner, pooled.memory, nbytes, rounded, stream));
                }
            }
        }
        // Cache miss: go to the backend, flushing the cache once on failure.
        let memory = match self.backend.raw_alloc(rounded) {
            Some(m) => m,
            None => {
                self.empty_cache();
                self.backend
                    .raw_alloc(rounded)
                    .ok_or(Error::OutOfMemory { requested: rounded })?
            }
        };
        let mut inner = self.inner.lock().unwrap();
        inner.stats.raw_alloc_count += 1;
        Ok(self.check_out(&mut inner, memory, nbytes, rounded, stream))
    }

    fn check_out(
        &self,
        inner: &mut Inner,
        memory: Arc<Memory>,
        requested: usize,
        rounded: usize,
        stream: StreamId,
    ) -> Block {
        let id = inner.next_id;
        inner.next_id += 1;
        inner.stats.bytes_in_use += rounded;
        inner.stats.peak_bytes_in_use = inner.stats.peak_bytes_in_use.max(inner.stats.bytes_in_use);
        inner.in_use.insert(
            id,
            InUseMeta {
                rounded_bytes: rounded,
                home_stream: stream,
                extra_use_streams: BTreeSet::new(),
                memory: memory.clone(),
            },
        );
        Block {
            id,
            requested_bytes: requested,
            rounded_bytes: rounded,
            home_stream: stream,
            memory,
        }
    }

    /// Return a block. With no recorded cross-stream uses it is pooled
    /// immediately (no waiting on queued kernels: same-stream FIFO order
    /// already serializes any reuse after the block's last use). Otherwise
    /// it is held until events recorded on the extra streams complete.
    pub fn free(&self, block: &Block) -> Result<()> {
        let meta = {
            let mut inner = self.inner.lock().unwrap();
            inner.sweep_deferred();
            inner
                .in_use
                .remove(&block.id)
                .ok_or(Error::DoubleFree(block.id))?
        };
        if !self.caching {
            {
                let mut inner = self.inner.lock().unwrap();
                inner.stats.bytes_in_use -= meta.rounded_bytes;
                inner.stats.raw_free_count += 1;
            }
            // outside the lock: a blocking backend may wait on stream work,
            // and stream workers themselves call into the allocator
            self.backend.raw_free(meta.memory);
            return Ok(());
        }
        if meta.extra_use_streams.is_empty() {
            let mut inner = self.inner.lock().unwrap();
            inner.stats.bytes_in_use -= meta.rounded_bytes;
            inner.stats.bytes_cached += meta.rounded_bytes;
            inner
                .pools
                .entry(meta.home_stream)
                .or_insert_with(Pool::new)
                .free_lists
                .entry(meta.rounded_bytes)
                .or_default()
                .push(PooledBlock {
                    memory: meta.memory,
                });
        } else {
            let events: Vec<Event> = meta
                .extra_use_streams
                .iter()
                .map(|s| self.sync.record_event(*s))
                .collect();
            let mut inner = self.inner.lock().unwrap();
            inner.deferred.push(DeferredBlock {
                rounded_bytes: meta.rounded_bytes,
                home_stream: meta.home_stream,
                memory: meta.memory,
                events,
            });
            inner.sweep_deferred();
        }
        Ok(())
    }

    /// Note that `block` is used on `stream`. A later free waits for that
    /// stream to pass the use point before the block becomes reusable.
    pub fn record_stream(&self, block: &Block, stream: StreamId) {
        let mut inner = self.inner.lock().unwrap();
        if let Some(meta) = inner.in_use.get_mut(&block.id) {
            if stream != meta.home_stream {
                meta.extra_use_streams.insert(stream);
            }
        }
    }

    /// Release every cached block back to the backend. Returns bytes
    /// released. In-use blocks are untouched.
    pub fn empty_cache(&self) -> usize {
        let regions: Vec<(usize, Arc<Memory>)> = {
            let mut inner = self.inner.lock().unwrap();
            inner.sweep_deferred();
            let mut regions = Vec::new();
            for pool in inner.pools.values_mut() {
                for (rounded, list) in pool.free_lists.iter_mut() {
                    for pooled in list.drain(..) {
                        regions.push((*rounded, pooled.memory));
                    }
                }
            }
            let released: usize = regions.iter().map(|(r, _)| *r).sum();
            inner.stats.bytes_cached -= released;
            inner.stats.raw_free_count += regions.len() as u64;
            regions
        };
        let mut released = 0;
        for (rounded, memory) in regions {
            released += rounded;
            self.backend.raw_free(memory);
        }
        released
    }

    /// Atomic snapshot of the counters.
    pub fn stats(&self) -> AllocStats {
        let mut inner = self.inner.lock().unwrap();
        inner.sweep_deferred();
        inner.stats
    }

    /// Introspection for tests: state of a block id, if the allocator
    /// still knows it.
    pub fn block_state(&self, id: u64) -> Option<BlockState> {
        let inner = self.inner.lock().unwrap();
        if inner.in_use.contains_key(&id) {
            Some(BlockState::InUse)
        } else {
            None
        }
    }

    /// Number of blocks parked in `stream`'s pool.
    pub fn pooled_blocks(&self, stream: StreamId) -> usize {
        let inner = self.inner.lock().unwrap();
        inner
            .pools
            .get(&stream)
            .map(|p| p.free_lists.values().map(Vec::len).sum())
            .unwrap_or(0)
    }

    /// Number of freed blocks still waiting on cross-stream events.
    pub fn deferred_blocks(&self) -> usize {
        self.inner.lock().unwrap().deferred.len()
    }
}
