//! Zero-copy exchange with caller-owned buffers.
//!
//! Wrapping and unwrapping never copy elements: both sides describe the
//! same memory region, so writes on either side are visible to the other
//! and the cost is constant no matter how large the buffer is.

use super::{contiguous_strides, numel, Storage, Tensor};
use crate::dtype::DType;
use crate::error::{Error, Result};
use crate::memory::Memory;
use crate::runtime::Runtime;
use std::sync::Arc;

type ReleaseCallback = Box<dyn FnOnce() + Send>;

/// Opaque handle to memory owned outside the allocator.
pub struct ExternalBuffer {
    memory: Arc<Memory>,
    nbytes: usize,
    offset_bytes: usize,
    release: Option<ReleaseCallback>,
    // set when produced by `to_external`: keeps the tensor's storage (and
    // its allocator block) alive while the buffer is out there
    keep_alive: Option<Storage>,
}

impl ExternalBuffer {
    /// Wrap caller-owned memory of `nbytes` usable bytes.
    pub fn new(memory: Arc<Memory>, nbytes: usize) -> Self {
        ExternalBuffer {
            memory,
            nbytes,
            offset_bytes: 0,
            release: None,
            keep_alive: None,
        }
    }

    /// Callback invoked exactly once, when the wrapping storage's use
    /// count reaches zero.
    pub fn with_release(mut self, release: ReleaseCallback) -> Self {
        self.release = Some(release);
        self
    }

    pub fn memory(&self) -> &Arc<Memory> {
        &self.memory
    }

    pub fn nbytes(&self) -> usize {
        self.nbytes
    }

    pub fn offset_bytes(&self) -> usize {
        self.offset_bytes
    }
}

impl std::fmt::Debug for ExternalBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalBuffer")
            .field("nbytes", &self.nbytes)
            .field("offset_bytes", &self.offset_bytes)
            .finish()
    }
}

impl Tensor {
    /// View `buf` as a tensor without copying. The buffer's release
    /// callback fires when the last handle to the wrapping storage drops.
    pub fn from_external(
        rt: &Runtime,
        buf: ExternalBuffer,
        shape: &[usize],
        dtype: DType,
    ) -> Result<Tensor> {
        let needed = numel(shape) * dtype.size_bytes();
        let usable = buf.nbytes.saturating_sub(buf.offset_bytes);
        if usable < needed {
            return Err(Error::BufferTooSmall {
                nbytes: usable,
                needed,
            });
        }
        if buf.offset_bytes % dtype.size_bytes() != 0 {
            return Err(Error::ShapeMismatch(format!(
                "buffer offset {} is not a multiple of element size {}",
                buf.offset_bytes,
                dtype.size_bytes()
            )));
        }
        let offset_elems = buf.offset_bytes / dtype.size_bytes();
        let release: Option<ReleaseCallback> = match (buf.release, buf.keep_alive) {
            (None, None) => None,
            (release, keep) => Some(Box::new(move || {
                if let Some(r) = release {
                    r();
                }
                drop(keep);
            })),
        };
        let storage = Storage::new_external(rt, buf.memory, buf.nbytes, release);
        Ok(Tensor {
            storage,
            offset: offset_elems,
            shape: shape.to_vec(),
            strides: contiguous_strides(shape),
            dtype,
            autograd: None,
        })
    }

    /// Expose this tensor's memory as an external buffer without copying.
    /// Synchronizes first so pending kernels writing the storage complete;
    /// the buffer keeps the storage alive.
    pub fn to_external(&self) -> Result<ExternalBuffer> {
        if !self.is_contiguous() {
            return Err(Error::NonContiguous);
        }
        self.runtime().synchronize();
        Ok(ExternalBuffer {
            memory: self.storage.memory().clone(),
            nbytes: self.storage.nbytes(),
            offset_bytes: self.offset * self.dtype.size_bytes(),
            release: None,
            keep_alive: Some(self.storage.clone()),
        })
    }
}
