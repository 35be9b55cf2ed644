//! Reductions: sum, mean, max — full or along one axis.

use super::{begin, gather, launch, record_op1, require_float, scatter_contig};
use crate::autograd::{SavedCtx, SavedTensor};
use crate::dtype::DType;
use crate::error::{Error, Result};
use crate::tensor::element::FloatElement;
use crate::tensor::{Storage, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

impl ReduceOp {
    pub fn name(self) -> &'static str {
        match self {
            ReduceOp::Sum => "sum",
            ReduceOp::Mean => "mean",
            ReduceOp::Max => "max",
        }
    }
}

/// Split a shape at `axis` into (outer, len, inner) extents. `axis = None`
/// treats the whole tensor as one lane.
fn lanes(shape: &[usize], axis: Option<usize>) -> (usize, usize, usize) {
    match axis {
        None => (1, shape.iter().product(), 1),
        Some(ax) => {
            let outer: usize = shape[..ax].iter().product();
            let inner: usize = shape[ax + 1..].iter().product();
            (outer, shape[ax], inner)
        }
    }
}

fn out_shape(shape: &[usize], axis: Option<usize>) -> Vec<usize> {
    match axis {
        None => vec![],
        Some(ax) => {
            let mut s = shape.to_vec();
            s.remove(ax);
            s
        }
    }
}

fn reduce_kernel<T: FloatElement>(
    op: ReduceOp,
    data: &[T],
    outer: usize,
    len: usize,
    inner: usize,
) -> Vec<T> {
    let mut out = vec![T::ZERO; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let mut acc = match op {
                ReduceOp::Sum | ReduceOp::Mean => T::ZERO,
                ReduceOp::Max => T::NEG_INFINITY,
            };
            for k in 0..len {
                let v = data[(o * len + k) * inner + i];
                acc = match op {
                    ReduceOp::Sum | ReduceOp::Mean => acc + v,
                    ReduceOp::Max => {
                        if v > acc {
                            v
                        } else {
                            acc
                        }
                    }
                };
            }
            if op == ReduceOp::Mean {
                acc = acc / T::from_f64(len as f64);
            }
            out[o * inner + i] = acc;
        }
    }
    out
}

pub(crate) fn reduce(op: ReduceOp, t: &Tensor, axis: Option<usize>) -> Result<Tensor> {
    let work = begin(op.name());
    require_float(op.name(), t)?;
    if let Some(ax) = axis {
        if ax >= t.rank() {
            return Err(Error::AxisOutOfRange {
                axis: ax,
                rank: t.rank(),
            });
        }
    }
    let (outer, len, inner) = lanes(t.shape(), axis);
    if op == ReduceOp::Max && len == 0 {
        return Err(Error::EmptyReduction);
    }
    let shape_out = out_shape(t.shape(), axis);
    let dtype = t.dtype();
    let mut out = Tensor::empty(t.runtime(), &shape_out, dtype)?;
    let (st, lt) = (t.storage().clone(), t.layout());
    let so = out.storage().clone();
    launch(work, &[t.storage(), out.storage()], move || match dtype {
        DType::F32 => {
            let data = gather::<f32>(&st, &lt);
            scatter_contig(&so, &reduce_kernel(op, &data, outer, len, inner));
        }
        DType::F64 => {
            let data = gather::<f64>(&st, &lt);
            scatter_contig(&so, &reduce_kernel(op, &data, outer, len, inner));
        }
        _ => unreachable!(),
    })?;

    let in_shape = t.shape().to_vec();
    match op {
        ReduceOp::Sum => record_op1(
            "sum",
            &[t],
            &mut out,
            vec![],
            move |_: &SavedCtx, up: &[Tensor]| Ok(vec![Some(spread(&up[0], &in_shape, axis, 1.0)?)]),
        ),
        ReduceOp::Mean => record_op1(
            "mean",
            &[t],
            &mut out,
            vec![],
            move |_: &SavedCtx, up: &[Tensor]| {
                let scale = 1.0 / len as f64;
                Ok(vec![Some(spread(&up[0], &in_shape, axis, scale)?)])
            },
        ),
        ReduceOp::Max => {
            let saved = vec![SavedTensor::new(t), SavedTensor::new(&out)];
            record_op1("max", &[t], &mut out, saved, move |saved: &SavedCtx, up: &[Tensor]| {
                let input = saved.get(0)?;
                let result = saved.get(1)?;
                Ok(vec![Some(max_grad(&input, &result, &up[0], axis)?)])
            })
        }
    }
    Ok(out)
}

/// Broadcast a reduced gradient back over the reduced axis, scaled.
fn spread(g: &Tensor, in_shape: &[usize], axis: Option<usize>, scale: f64) -> Result<Tensor> {
    let scaled = if scale == 1.0 {
        g.clone()
    } else {
        g.mul_scalar(scale)?
    };
    match axis {
        None => scaled.broadcast_to_shape(in_shape),
        Some(ax) => {
            let mut keep = in_shape.to_vec();
            keep[ax] = 1;
            scaled.contiguous()?.reshape(&keep)?.broadcast_to_shape(in_shape)
        }
    }
}

/// Route gradient to the first maximal element of each lane (deterministic
/// tie-break).
fn max_grad(input: &Tensor, result: &Tensor, g: &Tensor, axis: Option<usize>) -> Result<Tensor> {
    let work = begin("max_backward");
    let dtype = input.dtype();
    let (outer, len, inner) = lanes(input.shape(), axis);
    let mut out = Tensor::empty(input.runtime(), input.shape(), dtype)?;
    let (si, li) = (input.storage().clone(), input.layout());
    let (sr, lr) = (result.storage().clone(), result.layout());
    let (sg, lg) = (g.storage().clone(), g.layout());
    let so = out.storage().clone();
    launch(
        work,
        &[input.storage(), result.storage(), g.storage(), out.storage()],
        move || {
            fn go<T: FloatElement>(
                si: &Storage,
                li: &crate::tensor::Layout,
                sr: &Storage,
                lr: &crate::tensor::Layout,
                sg: &Storage,
                lg: &crate::tensor::Layout,
                so: &Storage,
                outer: usize,
                len: usize,
                inner: usize,
            ) {
                let data = gather::<T>(si, li);
                let maxes = gather::<T>(sr, lr);
                let grads = gather::<T>(sg, lg);
                let mut out = vec![T::ZERO; data.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let lane_max = maxes[o * inner + i];
                        let lane_grad = grads[o * inner + i];
                        for k in 0..len {
                            let idx = (o * len + k) * inner + i;
                            if data[idx] == lane_max {
                                out[idx] = lane_grad;
                                break;
                            }
                        }
                    }
                }
                scatter_contig(so, &out);
            }
            match dtype {
                DType::F32 => go::<f32>(&si, &li, &sr, &lr, &sg, &lg, &so, outer, len, inner),
                DType::F64 => go::<f64>(&si, &li, &sr, &lr, &sg, &lg, &so, outer, len, inner),
                _ => unreachable!(),
            }
        },
    )?;
    out.set_autograd_meta(None);
    Ok(out)
}

impl Tensor {
    /// Sum over all elements (`axis = None`, rank-0 result) or along one
    /// axis (which is removed).
    pub fn sum(&self, axis: Option<usize>) -> Result<Tensor> {
        reduce(ReduceOp::Sum, self, axis)
    }

    pub fn mean(&self, axis: Option<usize>) -> Result<Tensor> {
        reduce(ReduceOp::Mean, self, axis)
    }

    pub fn max_reduce(&self, axis: Option<usize>) -> Result<Tensor> {
        reduce(ReduceOp::Max, self, axis)
    }

    pub fn reduce_op(&self, op: ReduceOp, axis: Option<usize>) -> Result<Tensor> {
        reduce(op, self, axis)
    }
}
