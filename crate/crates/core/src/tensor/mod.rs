//! The strided tensor type and its constructors, views, and host transfer.

mod element;
mod external;
mod layout;
pub mod mtns;
mod ops;
mod storage;

pub use element::{Element, FloatElement};
pub use external::ExternalBuffer;
pub use layout::{broadcast_shape, contiguous_strides, numel, Layout};
pub use ops::{BinaryOp, ReduceOp, UnaryOp};
pub use storage::Storage;

use crate::autograd::AutogradMeta;
use crate::dtype::DType;
use crate::error::{Error, Result};
use crate::rng::Xoshiro256StarStar;
use crate::runtime::{current_stream, Runtime};
use std::sync::Arc;

/// A view (shape, strides, offset) over a use-counted [`Storage`].
///
/// Cloning a tensor clones the *handle*: both share storage, and writes
/// through one view are visible through every other. Out-of-place ops
/// always produce fresh storage.
#[derive(Clone)]
pub struct Tensor {
    storage: Storage,
    offset: usize,
    shape: Vec<usize>,
    strides: Vec<isize>,
    dtype: DType,
    autograd: Option<Arc<AutogradMeta>>,
}

impl Tensor {
    // ---- construction ---------------------------------------------------

    fn new_contiguous(rt: &Runtime, shape: &[usize], dtype: DType) -> Result<Tensor> {
        let n = numel(shape);
        let storage = Storage::new_pooled(rt, n * dtype.size_bytes())?;
        Ok(Tensor {
            storage,
            offset: 0,
            shape: shape.to_vec(),
            strides: contiguous_strides(shape),
            dtype,
            autograd: None,
        })
    }

    /// Uninitialized contiguous tensor. Contents are whatever the reused
    /// block held before.
    pub fn empty(rt: &Runtime, shape: &[usize], dtype: DType) -> Result<Tensor> {
        Self::new_contiguous(rt, shape, dtype)
    }

    /// Contiguous tensor from row-major host values.
    pub fn from_slice<T: Element>(rt: &Runtime, data: &[T], shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} values cannot fill shape {:?}",
                data.len(),
                shape
            )));
        }
        let t = Self::new_contiguous(rt, shape, T::DTYPE)?;
        let mem = t.storage.memory();
        for (i, &v) in data.iter().enumerate() {
            T::store(mem, i, v);
        }
        Ok(t)
    }

    pub fn from_f32(rt: &Runtime, data: &[f32], shape: &[usize]) -> Result<Tensor> {
        Self::from_slice(rt, data, shape)
    }

    pub fn from_f64(rt: &Runtime, data: &[f64], shape: &[usize]) -> Result<Tensor> {
        Self::from_slice(rt, data, shape)
    }

    pub fn from_i64(rt: &Runtime, data: &[i64], shape: &[usize]) -> Result<Tensor> {
        Self::from_slice(rt, data, shape)
    }

    pub fn from_bool(rt: &Runtime, data: &[bool], shape: &[usize]) -> Result<Tensor> {
        Self::from_slice(rt, data, shape)
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(rt: &Runtime, value: f64, dtype: DType) -> Result<Tensor> {
        match dtype {
            DType::F32 => Self::from_f32(rt, &[value as f32], &[]),
            DType::F64 => Self::from_f64(rt, &[value], &[]),
            DType::I64 => Self::from_i64(rt, &[value as i64], &[]),
            DType::Bool => Self::from_bool(rt, &[value != 0.0], &[]),
        }
    }

    pub fn full(rt: &Runtime, shape: &[usize], value: f64, dtype: DType) -> Result<Tensor> {
        let t = Self::new_contiguous(rt, shape, dtype)?;
        let mem = t.storage.memory();
        let n = t.numel();
        match dtype {
            DType::F32 => {
                let v = value as f32;
                (0..n).for_each(|i| mem.write_f32(i, v));
            }
            DType::F64 => (0..n).for_each(|i| mem.write_f64(i, value)),
            DType::I64 => {
                let v = value as i64;
                (0..n).for_each(|i| mem.write_i64(i, v));
            }
            DType::Bool => {
                let v = value != 0.0;
                (0..n).for_each(|i| mem.write_bool(i, v));
            }
        }
        Ok(t)
    }

    pub fn zeros(rt: &Runtime, shape: &[usize], dtype: DType) -> Result<Tensor> {
        Self::full(rt, shape, 0.0, dtype)
    }

    pub fn ones(rt: &Runtime, shape: &[usize], dtype: DType) -> Result<Tensor> {
        Self::full(rt, shape, 1.0, dtype)
    }

    pub fn zeros_like(&self) -> Result<Tensor> {
        Self::zeros(self.runtime(), &self.shape, self.dtype)
    }

    pub fn ones_like(&self) -> Result<Tensor> {
        Self::ones(self.runtime(), &self.shape, self.dtype)
    }

    /// Standard-normal samples from the documented xoshiro256** +
    /// Box-Muller generator. Same `(shape, seed)` gives bitwise-identical
    /// tensors.
    pub fn randn(rt: &Runtime, shape: &[usize], seed: u64) -> Result<Tensor> {
        Self::randn_with(rt, shape, seed, DType::F32)
    }

    pub fn randn_with(rt: &Runtime, shape: &[usize], seed: u64, dtype: DType) -> Result<Tensor> {
        if !dtype.is_float() {
            return Err(Error::UnsupportedDType { op: "randn", dtype });
        }
        let t = Self::new_contiguous(rt, shape, dtype)?;
        let mem = t.storage.memory();
        let mut rng = Xoshiro256StarStar::new(seed);
        for i in 0..t.numel() {
            let z = rng.next_normal();
            match dtype {
                DType::F32 => mem.write_f32(i, z as f32),
                DType::F64 => mem.write_f64(i, z),
                _ => unreachable!(),
            }
        }
        Ok(t)
    }

    // ---- metadata --------------------------------------------------------

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn strides(&self) -> &[isize] {
        &self.strides
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    pub fn is_contiguous(&self) -> bool {
        self.layout().is_contiguous()
    }

    pub fn is_scalar_shaped(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn layout(&self) -> Layout {
        Layout {
            offset: self.offset,
            shape: self.shape.clone(),
            strides: self.strides.clone(),
        }
    }

    pub fn runtime(&self) -> &Runtime {
        self.storage.runtime()
    }

    pub fn storage(&self) -> &Storage {
        &self.storage
    }

    /// Mutation counter of the shared storage.
    pub fn version(&self) -> u64 {
        self.storage.version()
    }

    /// Live handles to the shared storage.
    pub fn use_count(&self) -> usize {
        self.storage.use_count()
    }

    // ---- autograd hooks ---------------------------------------------------

    pub fn requires_grad(&self) -> bool {
        self.autograd.is_some()
    }

    pub(crate) fn autograd_meta(&self) -> Option<&Arc<AutogradMeta>> {
        self.autograd.as_ref()
    }

    pub(crate) fn set_autograd_meta(&mut self, meta: Option<Arc<AutogradMeta>>) {
        self.autograd = meta;
    }

    /// Turn this handle into a leaf that accumulates `.grad`.
    pub fn set_requires_grad(&mut self, on: bool) -> Result<()> {
        if on {
            if !self.dtype.is_float() {
                return Err(Error::UnsupportedDType {
                    op: "requires_grad",
                    dtype: self.dtype,
                });
            }
            if self.autograd.is_none() {
                self.autograd = Some(Arc::new(AutogradMeta::leaf_with_shape(self.shape.clone())));
                self.storage.mark_grad_leaf();
            }
        } else {
            self.autograd = None;
        }
        Ok(())
    }

    /// Builder form of [`Tensor::set_requires_grad`].
    pub fn requiring_grad(mut self) -> Result<Tensor> {
        self.set_requires_grad(true)?;
        Ok(self)
    }

    /// Accumulated gradient of a leaf, if any.
    pub fn grad(&self) -> Option<Tensor> {
        self.autograd.as_ref().and_then(|m| m.grad())
    }

    /// Drop the accumulated gradient, releasing its storage immediately.
    pub fn clear_grad(&self) {
        if let Some(meta) = &self.autograd {
            meta.clear_grad();
        }
    }

    /// View sharing storage with no grad history.
    pub fn detach(&self) -> Tensor {
        let mut t = self.clone();
        t.autograd = None;
        t
    }

    pub(crate) fn is_leaf(&self) -> bool {
        self.autograd.as_ref().is_some_and(|m| m.is_leaf())
    }

    // ---- host transfer -----------------------------------------------------

    /// Wait for every queued kernel touching this tensor's storage.
    pub fn sync(&self) {
        self.runtime().synchronize();
    }

    /// Copy out row-major values, synchronizing first.
    pub fn to_vec<T: Element>(&self) -> Result<Vec<T>> {
        if self.dtype != T::DTYPE {
            return Err(Error::DTypeMismatch {
                lhs: self.dtype,
                rhs: T::DTYPE,
            });
        }
        self.sync();
        let mem = self.storage.memory();
        Ok(self.layout().iter().map(|i| T::load(mem, i)).collect())
    }

    pub fn to_vec_f32(&self) -> Result<Vec<f32>> {
        self.to_vec::<f32>()
    }

    pub fn to_vec_f64(&self) -> Result<Vec<f64>> {
        self.to_vec::<f64>()
    }

    pub fn to_vec_i64(&self) -> Result<Vec<i64>> {
        self.to_vec::<i64>()
    }

    pub fn to_vec_bool(&self) -> Result<Vec<bool>> {
        self.to_vec::<bool>()
    }

    /// Row-major values of a float tensor widened to f64.
    pub fn to_f64_vec_lossy(&self) -> Result<Vec<f64>> {
        match self.dtype {
            DType::F32 => Ok(self.to_vec::<f32>()?.into_iter().map(f64::from).collect()),
            DType::F64 => self.to_vec::<f64>(),
            DType::I64 => Ok(self
                .to_vec::<i64>()?
                .into_iter()
                .map(|v| v as f64)
                .collect()),
            DType::Bool => Ok(self
                .to_vec::<bool>()?
                .into_iter()
                .map(|v| if v { 1.0 } else { 0.0 })
                .collect()),
        }
    }

    /// The single value of a one-element tensor, as f64.
    pub fn item_f64(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.to_f64_vec_lossy()?[0])
    }

    // ---- views ---------------------------------------------------------------

    fn view_with(&self, offset: usize, shape: Vec<usize>, strides: Vec<isize>) -> Tensor {
        Tensor {
            storage: self.storage.clone(),
            offset,
            shape,
            strides,
            dtype: self.dtype,
            autograd: None, // callers attach grad history
        }
    }

    /// Contiguity-preserving reshape. Never copies; errors on
    /// non-contiguous input.
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        if !self.is_contiguous() {
            return Err(Error::NonContiguousReshape);
        }
        if numel(new_shape) != self.numel() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} ({} elements) to {:?}",
                self.shape,
                self.numel(),
                new_shape
            )));
        }
        let out = self.view_with(
            self.offset,
            new_shape.to_vec(),
            contiguous_strides(new_shape),
        );
        ops::attach_view_grad(self, out, "reshape")
    }

    /// Collapse all dims from `start_dim` on into one. Requires contiguity
    /// like `reshape`.
    pub fn flatten_from(&self, start_dim: usize) -> Result<Tensor> {
        let keep = &self.shape[..start_dim.min(self.rank())];
        let rest: usize = self.shape[start_dim.min(self.rank())..].iter().product();
        let mut shape = keep.to_vec();
        shape.push(rest);
        self.reshape(&shape)
    }

    /// Swap two dimensions. Pure view.
    pub fn transpose(&self, d0: usize, d1: usize) -> Result<Tensor> {
        let rank = self.rank();
        if d0 >= rank || d1 >= rank {
            return Err(Error::AxisOutOfRange {
                axis: d0.max(d1),
                rank,
            });
        }
        let mut shape = self.shape.clone();
        let mut strides = self.strides.clone();
        shape.swap(d0, d1);
        strides.swap(d0, d1);
        let out = self.view_with(self.offset, shape, strides);
        ops::attach_transpose_grad(self, out, d0, d1)
    }

    /// Half-open range `[start, stop)` along `axis`. Pure view.
    pub fn slice(&self, axis: usize, start: usize, stop: usize) -> Result<Tensor> {
        let rank = self.rank();
        if axis >= rank {
            return Err(Error::AxisOutOfRange { axis, rank });
        }
        let extent = self.shape[axis];
        if start > stop || stop > extent {
            return Err(Error::SliceOutOfRange {
                start,
                stop,
                extent,
            });
        }
        let mut shape = self.shape.clone();
        shape[axis] = stop - start;
        let offset = (self.offset as isize + start as isize * self.strides[axis]) as usize;
        let out = self.view_with(offset, shape, self.strides.clone());
        ops::attach_slice_grad(self, out, axis, start, stop)
    }

    /// Materialize a contiguous copy (out of place, differentiable as
    /// identity).
    pub fn contiguous(&self) -> Result<Tensor> {
        if self.is_contiguous() {
            return Ok(self.clone());
        }
        ops::materialize_contiguous(self)
    }

    /// Record that the calling thread's stream uses this tensor's storage.
    pub(crate) fn record_current_use(&self) {
        self.storage.record_use(current_stream());
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("dtype", &self.dtype)
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}
