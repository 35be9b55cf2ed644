//! Raw byte regions backing tensor storage.
//!
//! A [`Memory`] is a fixed-size buffer of 64-bit words accessed with relaxed
//! atomics. Worker threads standing in for device streams read and write the
//! same region the host hands out, sometimes after the host has already
//! returned the block to the allocator cache (the free-before-last-use case).
//! Word-level atomics keep that entirely in safe Rust: unsynchronized
//! concurrent writes to one element can produce unspecified *values*, never
//! memory unsafety, which is exactly the contract callers get.
//!
//! Sub-word element types (F32 halves, Bool bytes) are spliced into their
//! word with a plain load/store pair. Writers to the same word must be
//! ordered through the stream executor; the runtime always does this for
//! its own kernels.

use std::sync::atomic::{AtomicU64, Ordering};

const REL: Ordering = Ordering::Relaxed;

/// A word-addressed byte region. Length is always a multiple of 8 bytes.
pub struct Memory {
    words: Box<[AtomicU64]>,
}

impl Memory {
    /// Allocate a zero-initialized region of at least `nbytes` bytes.
    pub fn new(nbytes: usize) -> Self {
        let words = nbytes.div_ceil(8);
        Memory {
            words: (0..words).map(|_| AtomicU64::new(0)).collect(),
        }
    }

    /// Capacity in bytes (multiple of 8).
    pub fn nbytes(&self) -> usize {
        self.words.len() * 8
    }

    #[inline]
    pub fn load_word(&self, idx: usize) -> u64 {
        self.words[idx].load(REL)
    }

    #[inline]
    pub fn store_word(&self, idx: usize, value: u64) {
        self.words[idx].store(value, REL);
    }

    #[inline]
    pub fn read_f64(&self, elem: usize) -> f64 {
        f64::from_bits(self.load_word(elem))
    }

    #[inline]
    pub fn write_f64(&self, elem: usize, value: f64) {
        self.store_word(elem, value.to_bits());
    }

    #[inline]
    pub fn read_i64(&self, elem: usize) -> i64 {
        self.load_word(elem) as i64
    }

    #[inline]
    pub fn write_i64(&self, elem: usize, value: i64) {
        self.store_word(elem, value as u64);
    }

    #[inline]
    pub fn read_f32(&self, elem: usize) -> f32 {
        let word = self.load_word(elem / 2);
        let bits = (word >> (32 * (elem % 2))) as u32;
        f32::from_bits(bits)
    }

    #[inline]
    pub fn write_f32(&self, elem: usize, value: f32) {
        let slot = &self.words[elem / 2];
        let shift = 32 * (elem % 2);
        let mask = !(0xffff_ffffu64 << shift);
        let word = slot.load(REL);
        slot.store((word & mask) | ((value.to_bits() as u64) << shift), REL);
    }

    #[inline]
    pub fn read_bool(&self, elem: usize) -> bool {
        let word = self.load_word(elem / 8);
        (word >> (8 * (elem % 8))) & 1 != 0
    }

    #[inline]
    pub fn write_bool(&self, elem: usize, value: bool) {
        let slot = &self.words[elem / 8];
        let shift = 8 * (elem % 8);
        let mask = !(0xffu64 << shift);
        let word = slot.load(REL);
        slot.store((word & mask) | ((value as u64) << shift), REL);
    }

    /// Fill every word with a byte pattern; used by the poison-check
    /// allocator harness.
    pub fn poison(&self, byte: u8) {
        let pattern = u64::from_le_bytes([byte; 8]);
        for w in self.words.iter() {
            w.store(pattern, REL);
        }
    }
}

impl std::fmt::Debug for Memory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Memory({} bytes)", self.nbytes())
    }
}
