//! Numerically stabilized softmax and log-softmax along one axis.

use super::{begin, gather, launch, record_op1, require_float, scatter_contig, sum_keepdim};
use crate::autograd::{SavedCtx, SavedTensor};
use crate::dtype::DType;
use crate::error::{Error, Result};
use crate::tensor::element::FloatElement;
use crate::tensor::Tensor;

fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn softmax_kernel<T: FloatElement>(
    data: &[T],
    outer: usize,
    len: usize,
    inner: usize,
    log: bool,
) -> Vec<T> {
    let mut out = vec![T::ZERO; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            // subtract the lane max so exp never overflows
            let mut m = T::NEG_INFINITY;
            for k in 0..len {
                let v = data[at(k)];
                if v > m {
                    m = v;
                }
            }
            let mut denom = T::ZERO;
            for k in 0..len {
                denom = denom + (data[at(k)] - m).exp();
            }
            for k in 0..len {
                let shifted = data[at(k)] - m;
                out[at(k)] = if log {
                    shifted - denom.ln()
                } else {
                    shifted.exp() / denom
                };
            }
        }
    }
    out
}

fn softmax_impl(t: &Tensor, axis: usize, log: bool) -> Result<Tensor> {
    let name: &'static str = if log { "log_softmax" } else { "softmax" };
    let work = begin(name);
    require_float(name, t)?;
    if axis >= t.rank() {
        return Err(Error::AxisOutOfRange {
            axis,
            rank: t.rank(),
        });
    }
    let (outer, len, inner) = lanes(t.shape(), axis);
    let dtype = t.dtype();
    let mut out = Tensor::empty(t.runtime(), t.shape(), dtype)?;
    let (st, lt) = (t.storage().clone(), t.layout());
    let so = out.storage().clone();
    launch(work, &[t.storage(), out.storage()], move || match dtype {
        DType::F32 => {
            let data = gather::<f32>(&st, &lt);
            scatter_contig(&so, &softmax_kernel(&data, outer, len, inner, log));
        }
        DType::F64 => {
            let data = gather::<f64>(&st, &lt);
            scatter_contig(&so, &softmax_kernel(&data, outer, len, inner, log));
        }
        _ => unreachable!(),
    })?;

    let saved = vec![SavedTensor::new(&out)];
    if log {
        // d log_softmax = g - softmax * sum(g, axis)
        record_op1(name, &[t], &mut out, saved, move |saved: &SavedCtx, up: &[Tensor]| {
            let logp = saved.get(0)?;
            let p = logp.exp()?;
            let gsum = sum_keepdim(&up[0], axis)?;
            Ok(vec![Some(up[0].sub(&p.mul(&gsum)?)?)])
        });
    } else {
        // d softmax = p * (g - sum(g * p, axis))
        record_op1(name, &[t], &mut out, saved, move |saved: &SavedCtx, up: &[Tensor]| {
            let p = saved.get(0)?;
            let dot = sum_keepdim(&up[0].mul(&p)?, axis)?;
            let centered = up[0].sub(&dot)?;
            Ok(vec![Some(p.mul(&centered)?)])
        });
    }
    Ok(out)
}

impl Tensor {
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        softmax_impl(self, axis, false)
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        softmax_impl(self, axis, true)
    }
}
