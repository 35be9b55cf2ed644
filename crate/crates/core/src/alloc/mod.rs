//! Caching memory allocator with one free-block pool per stream.
//!
//! Raw backend calls are the expensive part (a real `cudaFree` can block
//! until every queued kernel on every device finishes), so the allocator
//! hands freed blocks back out without touching the backend: sizes are
//! rounded up to a 512-byte quantum and cached on the stream that owns
//! them, keyed by rounded size, reused LIFO on exact match.
//!
//! Same-stream reuse needs no synchronization: streams serialize execution,
//! so a block freed on the host and immediately reallocated is only touched
//! by later kernels on that stream, which run after its last use. A block
//! that was also used on other streams ([`CachingAllocator::record_stream`])
//! is held back until events recorded on those streams complete.

mod allocator;
mod backend;

pub use allocator::{AllocStats, Block, BlockState, CachingAllocator};
pub use backend::{RawBackend, SimBackend, SystemBackend};

/// Default rounding quantum in bytes.
pub const DEFAULT_QUANTUM: usize = 512;

/// Smallest multiple of `quantum` covering `nbytes` (at least one quantum).
pub fn round_size_to(nbytes: usize, quantum: usize) -> usize {
    debug_assert!(quantum > 0);
    nbytes.max(1).div_ceil(quantum) * quantum
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_matches_quantum() {
        assert_eq!(round_size_to(1, 512), 512);
        assert_eq!(round_size_to(0, 512), 512);
        assert_eq!(round_size_to(512, 512), 512);
        assert_eq!(round_size_to(513, 512), 1024);
        assert_eq!(round_size_to(1000, 512), 1024);
        assert_eq!(round_size_to(100, 64), 128);
    }
}
