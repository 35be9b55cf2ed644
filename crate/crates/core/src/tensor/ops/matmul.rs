//! Rank-2 matrix multiply.

use super::{begin, gather, launch, record_op1, require_float, require_same_dtype, same_runtime};
use crate::autograd::{SavedCtx, SavedTensor};
use crate::dtype::DType;
use crate::error::{Error, Result};
use crate::tensor::element::FloatElement;
use crate::tensor::Tensor;

fn matmul_kernel<T: FloatElement>(a: Vec<T>, b: Vec<T>, m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    // i-k-j loop order keeps the inner walk contiguous in b and out
    for i in 0..m {
        for kk in 0..k {
            let aik = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + aik * brow[j];
            }
        }
    }
    out
}

impl Tensor {
    /// `[M,K] x [K,N] -> [M,N]`, float dtypes only.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let work = begin("matmul");
        same_runtime(self, other)?;
        require_same_dtype(self, other)?;
        require_float("matmul", self)?;
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul expects rank-2 inputs, got {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (other.shape()[0], other.shape()[1]);
        if k != k2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul inner dims differ: {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let dtype = self.dtype();
        let mut out = Tensor::empty(self.runtime(), &[m, n], dtype)?;
        let (sa, al) = (self.storage().clone(), self.layout());
        let (sb, bl) = (other.storage().clone(), other.layout());
        let so = out.storage().clone();
        launch(work, &[self.storage(), other.storage(), out.storage()], move || {
            match dtype {
                DType::F32 => {
                    let a = gather::<f32>(&sa, &al);
                    let b = gather::<f32>(&sb, &bl);
                    super::scatter_contig(&so, &matmul_kernel(a, b, m, k, n));
                }
                DType::F64 => {
                    let a = gather::<f64>(&sa, &al);
                    let b = gather::<f64>(&sb, &bl);
                    super::scatter_contig(&so, &matmul_kernel(a, b, m, k, n));
                }
                _ => unreachable!(),
            }
        })?;
        record_op1(
            "matmul",
            &[self, other],
            &mut out,
            vec![SavedTensor::new(self), SavedTensor::new(other)],
            |saved: &SavedCtx, up: &[Tensor]| {
                let (a, b) = (saved.get(0)?, saved.get(1)?);
                let da = up[0].matmul(&b.transpose(0, 1)?)?;
                let db = a.transpose(0, 1)?.matmul(&up[0])?;
                Ok(vec![Some(da), Some(db)])
            },
        );
        Ok(out)
    }
}
