//! Direct 2d cross-correlation (no kernel flip) with stride and padding.

use super::{begin, gather, launch, record_op1, require_float, require_same_dtype, same_runtime, scatter_contig};
use crate::autograd::{SavedCtx, SavedTensor};
use crate::dtype::DType;
use crate::error::{Error, Result};
use crate::tensor::element::FloatElement;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
}

fn conv_dims(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<ConvDims> {
    if input.len() != 4 || weight.len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "conv2d expects input [B,Cin,H,W] and weight [Cout,Cin,Kh,Kw], got {input:?} and {weight:?}"
        )));
    }
    let (b, cin, h, w) = (input[0], input[1], input[2], input[3]);
    let (cout, wcin, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
    if cin != wcin {
        return Err(Error::ShapeMismatch(format!(
            "conv2d channel mismatch: input has {cin}, weight expects {wcin}"
        )));
    }
    if stride == 0 {
        return Err(Error::ShapeMismatch("conv2d stride must be >= 1".into()));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::ShapeMismatch(format!(
            "kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * padding,
            w + 2 * padding
        )));
    }
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (w + 2 * padding - kw) / stride + 1;
    Ok(ConvDims {
        b,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        stride,
        padding,
        ho,
        wo,
    })
}

fn conv_forward<T: FloatElement>(x: &[T], w: &[T], bias: Option<&[T]>, d: ConvDims) -> Vec<T> {
    let mut out = vec![T::ZERO; d.b * d.cout * d.ho * d.wo];
    for b in 0..d.b {
        for co in 0..d.cout {
            let base_bias = bias.map(|bv| bv[co]).unwrap_or(T::ZERO);
            for oh in 0..d.ho {
                for ow in 0..d.wo {
                    let mut acc = base_bias;
                    for ci in 0..d.cin {
                        for kh in 0..d.kh {
                            let ih = (oh * d.stride + kh) as isize - d.padding as isize;
                            if ih < 0 || ih >= d.h as isize {
                                continue;
                            }
                            for kw in 0..d.kw {
                                let iw = (ow * d.stride + kw) as isize - d.padding as isize;
                                if iw < 0 || iw >= d.w as isize {
                                    continue;
                                }
                                let xi = ((b * d.cin + ci) * d.h + ih as usize) * d.w + iw as usize;
                                let wi = ((co * d.cin + ci) * d.kh + kh) * d.kw + kw;
                                acc = acc + x[xi] * w[wi];
                            }
                        }
                    }
                    out[((b * d.cout + co) * d.ho + oh) * d.wo + ow] = acc;
                }
            }
        }
    }
    out
}

/// dL/dx: scatter each output gradient across the window it came from.
fn conv_grad_input<T: FloatElement>(g: &[T], w: &[T], d: ConvDims) -> Vec<T> {
    let mut dx = vec![T::ZERO; d.b * d.cin * d.h * d.w];
    for b in 0..d.b {
        for co in 0..d.cout {
            for oh in 0..d.ho {
                for ow in 0..d.wo {
                    let go = g[((b * d.cout + co) * d.ho + oh) * d.wo + ow];
                    for ci in 0..d.cin {
                        for kh in 0..d.kh {
                            let ih = (oh * d.stride + kh) as isize - d.padding as isize;
                            if ih < 0 || ih >= d.h as isize {
                                continue;
                            }
                            for kw in 0..d.kw {
                                let iw = (ow * d.stride + kw) as isize - d.padding as isize;
                                if iw < 0 || iw >= d.w as isize {
                                    continue;
                                }
                                let xi = ((b * d.cin + ci) * d.h + ih as usize) * d.w + iw as usize;
                                let wi = ((co * d.cin + ci) * d.kh + kh) * d.kw + kw;
                                dx[xi] = dx[xi] + go * w[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// dL/dw: correlate input windows with output gradients.
fn conv_grad_weight<T: FloatElement>(g: &[T], x: &[T], d: ConvDims) -> Vec<T> {
    let mut dw = vec![T::ZERO; d.cout * d.cin * d.kh * d.kw];
    for b in 0..d.b {
        for co in 0..d.cout {
            for oh in 0..d.ho {
                for ow in 0..d.wo {
                    let go = g[((b * d.cout + co) * d.ho + oh) * d.wo + ow];
                    for ci in 0..d.cin {
                        for kh in 0..d.kh {
                            let ih = (oh * d.stride + kh) as isize - d.padding as isize;
                            if ih < 0 || ih >= d.h as isize {
                                continue;
                            }
                            for kw in 0..d.kw {
                                let iw = (ow * d.stride + kw) as isize - d.padding as isize;
                                if iw < 0 || iw >= d.w as isize {
                                    continue;
                                }
                                let xi = ((b * d.cin + ci) * d.h + ih as usize) * d.w + iw as usize;
                                let wi = ((co * d.cin + ci) * d.kh + kh) * d.kw + kw;
                                dw[wi] = dw[wi] + go * x[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    dw
}

fn conv_backward(
    which: ConvGrad,
    g: &Tensor,
    other: &Tensor,
    d: ConvDims,
    out_shape: &[usize],
) -> Result<Tensor> {
    let work = begin(match which {
        ConvGrad::Input => "conv2d_dx",
        ConvGrad::Weight => "conv2d_dw",
    });
    let dtype = g.dtype();
    let mut out = Tensor::empty(g.runtime(), out_shape, dtype)?;
    let (sg, lg) = (g.storage().clone(), g.layout());
    let (so2, lo2) = (other.storage().clone(), other.layout());
    let dst = out.storage().clone();
    launch(work, &[g.storage(), other.storage(), out.storage()], move || {
        match dtype {
            DType::F32 => {
                let gv = gather::<f32>(&sg, &lg);
                let ov = gather::<f32>(&so2, &lo2);
                let r = match which {
                    ConvGrad::Input => conv_grad_input(&gv, &ov, d),
                    ConvGrad::Weight => conv_grad_weight(&gv, &ov, d),
                };
                scatter_contig(&dst, &r);
            }
            DType::F64 => {
                let gv = gather::<f64>(&sg, &lg);
                let ov = gather::<f64>(&so2, &lo2);
                let r = match which {
                    ConvGrad::Input => conv_grad_input(&gv, &ov, d),
                    ConvGrad::Weight => conv_grad_weight(&gv, &ov, d),
                };
                scatter_contig(&dst, &r);
            }
            _ => unreachable!(),
        }
    })?;
    out.set_autograd_meta(None);
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
enum ConvGrad {
    Input,
    Weight,
}

impl Tensor {
    /// `input [B,Cin,H,W] * weight [Cout,Cin,Kh,Kw] -> [B,Cout,H',W']`
    /// where `H' = (H + 2*padding - Kh)/stride + 1`.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        let work = begin("conv2d");
        same_runtime(self, weight)?;
        require_same_dtype(self, weight)?;
        require_float("conv2d", self)?;
        let d = conv_dims(self.shape(), weight.shape(), stride, padding)?;
        if let Some(bias) = bias {
            same_runtime(self, bias)?;
            require_same_dtype(self, bias)?;
            if bias.shape() != [d.cout] {
                return Err(Error::ShapeMismatch(format!(
                    "conv2d bias must be [{}], got {:?}",
                    d.cout,
                    bias.shape()
                )));
            }
        }
        let dtype = self.dtype();
        let mut out = Tensor::empty(self.runtime(), &[d.b, d.cout, d.ho, d.wo], dtype)?;
        let (sx, lx) = (self.storage().clone(), self.layout());
        let (sw, lw) = (weight.storage().clone(), weight.layout());
        let sb = bias.map(|b| (b.storage().clone(), b.layout()));
        let so = out.storage().clone();
        let mut touched = vec![self.storage(), weight.storage(), out.storage()];
        if let Some(b) = bias {
            touched.push(b.storage());
        }
        launch(work, &touched, move || match dtype {
            DType::F32 => {
                let x = gather::<f32>(&sx, &lx);
                let w = gather::<f32>(&sw, &lw);
                let bv = sb.as_ref().map(|(s, l)| gather::<f32>(s, l));
                scatter_contig(&so, &conv_forward(&x, &w, bv.as_deref(), d));
            }
            DType::F64 => {
                let x = gather::<f64>(&sx, &lx);
                let w = gather::<f64>(&sw, &lw);
                let bv = sb.as_ref().map(|(s, l)| gather::<f64>(s, l));
                scatter_contig(&so, &conv_forward(&x, &w, bv.as_deref(), d));
            }
            _ => unreachable!(),
        })?;

        let mut inputs: Vec<&Tensor> = vec![self, weight];
        let mut saved = vec![SavedTensor::new(self), SavedTensor::new(weight)];
        if let Some(b) = bias {
            inputs.push(b);
            saved.push(SavedTensor::new(b));
        }
        let has_bias = bias.is_some();
        let x_shape = self.shape().to_vec();
        let w_shape = weight.shape().to_vec();
        record_op1("conv2d", &inputs, &mut out, saved, move |saved: &SavedCtx, up: &[Tensor]| {
            let x = saved.get(0)?;
            let w = saved.get(1)?;
            let g = &up[0];
            let dx = conv_backward(ConvGrad::Input, g, &w, d, &x_shape)?;
            let dw = conv_backward(ConvGrad::Weight, g, &x, d, &w_shape)?;
            let mut grads = vec![Some(dx), Some(dw)];
            if has_bias {
                // db = sum over batch and spatial positions
                let db = g.sum(Some(3))?.sum(Some(2))?.sum(Some(0))?;
                grads.push(Some(db));
            }
            Ok(grads)
        });
        Ok(out)
    }
}
