//! Tensor operations: kernels enqueued on streams plus their tape records.
//!
//! Every op follows the same shape: validate on the host, allocate the
//! output, queue a kernel closure that gathers its operands and scatters
//! the result, then attach a grad node if recording is on. Hosts never
//! read element data at enqueue time, so async mode runs ahead freely.

mod conv;
mod elementwise;
mod inplace;
mod matmul;
mod reduce;
mod softmax;

pub use elementwise::{BinaryOp, UnaryOp};
pub use reduce::ReduceOp;

use super::{Layout, Storage, Tensor};
use crate::autograd::{self, AutogradMeta, Edge, GradNode, SavedCtx, SavedTensor, VjpFn};
use crate::dtype::DType;
use crate::error::{Error, Result};
use crate::runtime::current_stream;
use crate::stream::WorkItem;
use crate::tensor::element::Element;
use std::sync::Arc;

// ---- kernel plumbing -----------------------------------------------------

/// Read a view into a contiguous row-major buffer.
pub(crate) fn gather<T: Element>(storage: &Storage, layout: &Layout) -> Vec<T> {
    let mem = storage.memory();
    layout.iter().map(|i| T::load(mem, i)).collect()
}

/// Write a contiguous row-major buffer into a fresh offset-0 output.
pub(crate) fn scatter_contig<T: Element>(storage: &Storage, values: &[T]) {
    let mem = storage.memory();
    for (i, &v) in values.iter().enumerate() {
        T::store(mem, i, v);
    }
}

/// Enqueue `kernel` on the calling thread's stream, recording the use of
/// each storage (cross-stream uses go to the allocator).
pub(crate) fn launch(
    started: crate::stream::WorkBuilder,
    storages: &[&Storage],
    kernel: impl FnOnce() + Send + 'static,
) -> Result<()> {
    let stream = current_stream();
    let mut runtime = None;
    for s in storages {
        s.record_use(stream);
        runtime = Some(s.runtime().clone());
    }
    let rt = runtime.expect("launch with at least one storage");
    rt.executor().enqueue(stream, started.kernel(kernel))
}

pub(crate) fn begin(label: &'static str) -> crate::stream::WorkBuilder {
    WorkItem::begin(label)
}

pub(crate) fn same_runtime(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.runtime().same_as(b.runtime()) {
        Ok(())
    } else {
        Err(Error::RuntimeMismatch)
    }
}

pub(crate) fn require_same_dtype(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dtype() == b.dtype() {
        Ok(())
    } else {
        Err(Error::DTypeMismatch {
            lhs: a.dtype(),
            rhs: b.dtype(),
        })
    }
}

pub(crate) fn require_float(op: &'static str, t: &Tensor) -> Result<()> {
    if t.dtype().is_float() {
        Ok(())
    } else {
        Err(Error::UnsupportedDType {
            op,
            dtype: t.dtype(),
        })
    }
}

// ---- tape recording --------------------------------------------------------

/// Attach a single-output grad node for `op` if recording applies.
pub(crate) fn record_op1(
    op: &'static str,
    inputs: &[&Tensor],
    out: &mut Tensor,
    saved: Vec<SavedTensor>,
    vjp: impl VjpFn + 'static,
) {
    if !autograd::grad_enabled() || !out.dtype().is_float() {
        return;
    }
    if !inputs.iter().any(|t| t.requires_grad()) {
        return;
    }
    let edges = inputs.iter().map(|t| Edge::for_tensor(t)).collect();
    let metas = vec![(out.shape().to_vec(), out.dtype())];
    let node = GradNode::new(op, edges, metas, saved, Box::new(vjp));
    out.set_autograd_meta(Some(Arc::new(AutogradMeta::from_node(node, 0))));
}

// ---- gradient shape helpers ---------------------------------------------------

/// Reduce a broadcast gradient back to `shape`: sum out added leading dims
/// and dims the input held at extent 1.
pub(crate) fn sum_to(g: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if g.shape() == shape {
        return Ok(g.clone());
    }
    let mut t = g.clone();
    while t.rank() > shape.len() {
        t = t.sum(Some(0))?;
    }
    for axis in 0..shape.len() {
        if shape[axis] == 1 && t.shape()[axis] != 1 {
            t = sum_keepdim(&t, axis)?;
        }
    }
    if t.shape() != shape {
        return Err(Error::ShapeMismatch(format!(
            "cannot reduce gradient {:?} to {:?}",
            g.shape(),
            shape
        )));
    }
    Ok(t)
}

/// Sum along `axis`, keeping it as extent 1.
pub(crate) fn sum_keepdim(t: &Tensor, axis: usize) -> Result<Tensor> {
    let mut shape = t.shape().to_vec();
    shape[axis] = 1;
    t.sum(Some(axis))?.reshape(&shape)
}

// ---- view gradients ------------------------------------------------------------

pub(crate) fn attach_view_grad(input: &Tensor, mut out: Tensor, op: &'static str) -> Result<Tensor> {
    let in_shape = input.shape().to_vec();
    record_op1(op, &[input], &mut out, vec![], move |_: &SavedCtx, up: &[Tensor]| {
        let g = up[0].contiguous()?.reshape(&in_shape)?;
        Ok(vec![Some(g)])
    });
    Ok(out)
}

pub(crate) fn attach_transpose_grad(
    input: &Tensor,
    mut out: Tensor,
    d0: usize,
    d1: usize,
) -> Result<Tensor> {
    record_op1(
        "transpose",
        &[input],
        &mut out,
        vec![],
        move |_: &SavedCtx, up: &[Tensor]| Ok(vec![Some(up[0].transpose(d0, d1)?)]),
    );
    Ok(out)
}

pub(crate) fn attach_slice_grad(
    input: &Tensor,
    mut out: Tensor,
    axis: usize,
    start: usize,
    _stop: usize,
) -> Result<Tensor> {
    let in_shape = input.shape().to_vec();
    record_op1(
        "slice",
        &[input],
        &mut out,
        vec![],
        move |_: &SavedCtx, up: &[Tensor]| Ok(vec![Some(embed_slice(&up[0], &in_shape, axis, start)?)]),
    );
    Ok(out)
}

/// Place `g` into a zero tensor of `shape` at offset `start` along `axis`
/// (adjoint of slice).
pub(crate) fn embed_slice(
    g: &Tensor,
    shape: &[usize],
    axis: usize,
    start: usize,
) -> Result<Tensor> {
    let work = begin("slice_backward");
    let out = Tensor::zeros(g.runtime(), shape, g.dtype())?;
    let out_view = out.slice(axis, start, start + g.shape()[axis])?;
    let (gs, gl) = (g.storage().clone(), g.layout());
    let (os, ol) = (out_view.storage().clone(), out_view.layout());
    let dtype = g.dtype();
    launch(work, &[g.storage(), out.storage()], move || {
        copy_strided(dtype, &gs, &gl, &os, &ol);
    })?;
    Ok(out)
}

/// Copy between two same-shape views, any strides.
pub(crate) fn copy_strided(dtype: DType, src: &Storage, sl: &Layout, dst: &Storage, dl: &Layout) {
    fn go<T: Element>(src: &Storage, sl: &Layout, dst: &Storage, dl: &Layout) {
        let sm = src.memory();
        let dm = dst.memory();
        for (si, di) in sl.iter().zip(dl.iter()) {
            T::store(dm, di, T::load(sm, si));
        }
    }
    match dtype {
        DType::F32 => go::<f32>(src, sl, dst, dl),
        DType::F64 => go::<f64>(src, sl, dst, dl),
        DType::I64 => go::<i64>(src, sl, dst, dl),
        DType::Bool => go::<bool>(src, sl, dst, dl),
    }
}

/// Out-of-place contiguous copy, differentiable as identity.
pub(crate) fn materialize_contiguous(t: &Tensor) -> Result<Tensor> {
    let work = begin("contiguous");
    let mut out = Tensor::empty(t.runtime(), t.shape(), t.dtype())?;
    let (ts, tl) = (t.storage().clone(), t.layout());
    let (os, ol) = (out.storage().clone(), out.layout());
    let dtype = t.dtype();
    launch(work, &[t.storage(), out.storage()], move || {
        copy_strided(dtype, &ts, &tl, &os, &ol);
    })?;
    record_op1("contiguous", &[t], &mut out, vec![], |_: &SavedCtx, up: &[Tensor]| {
        Ok(vec![Some(up[0].clone())])
    });
    Ok(out)
}

impl Tensor {
    /// Materialize this view broadcast to `shape`. Differentiable; the
    /// gradient sums over the broadcast dimensions.
    pub fn broadcast_to_shape(&self, shape: &[usize]) -> Result<Tensor> {
        let work = begin("broadcast");
        let bl = self.layout().broadcast_to(shape)?;
        let mut out = Tensor::empty(self.runtime(), shape, self.dtype())?;
        let ss = self.storage().clone();
        let (os, ol) = (out.storage().clone(), out.layout());
        let dtype = self.dtype();
        launch(work, &[self.storage(), out.storage()], move || {
            copy_strided(dtype, &ss, &bl, &os, &ol);
        })?;
        let in_shape = self.shape().to_vec();
        record_op1(
            "broadcast",
            &[self],
            &mut out,
            vec![],
            move |_: &SavedCtx, up: &[Tensor]| Ok(vec![Some(sum_to(&up[0], &in_shape)?)]),
        );
        Ok(out)
    }

    /// One-hot encode an integer class tensor of shape `[n]` into
    /// `[n, classes]` of `dtype`. Not differentiable.
    pub fn one_hot(&self, classes: usize, dtype: DType) -> Result<Tensor> {
        if self.dtype() != DType::I64 {
            return Err(Error::UnsupportedDType {
                op: "one_hot",
                dtype: self.dtype(),
            });
        }
        if self.rank() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "one_hot expects rank-1 labels, got {:?}",
                self.shape()
            )));
        }
        if !dtype.is_float() {
            return Err(Error::UnsupportedDType { op: "one_hot", dtype });
        }
        let work = begin("one_hot");
        let n = self.numel();
        let out = Tensor::zeros(self.runtime(), &[n, classes], dtype)?;
        let (ls, ll) = (self.storage().clone(), self.layout());
        let os = out.storage().clone();
        launch(work, &[self.storage(), out.storage()], move || {
            let lm = ls.memory();
            let om = os.memory();
            for (row, li) in ll.iter().enumerate() {
                let class = lm.read_i64(li);
                if class >= 0 && (class as usize) < classes {
                    let idx = row * classes + class as usize;
                    match dtype {
                        DType::F32 => om.write_f32(idx, 1.0),
                        DType::F64 => om.write_f64(idx, 1.0),
                        _ => {}
                    }
                }
            }
        })?;
        Ok(out)
    }
}
