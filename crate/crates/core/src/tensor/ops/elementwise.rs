//! Elementwise binary and unary ops with broadcasting.

use super::{begin, launch, record_op1, require_same_dtype, same_runtime, sum_to};
use crate::autograd::{SavedCtx, SavedTensor};
use crate::dtype::DType;
use crate::error::{Error, Result};
use crate::tensor::element::FloatElement;
use crate::tensor::{broadcast_shape, Layout, Storage, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    pub fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Log,
    Relu,
    Sqrt,
}

impl UnaryOp {
    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "neg",
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Relu => "relu",
            UnaryOp::Sqrt => "sqrt",
        }
    }
}

fn binary_kernel_float<T: FloatElement>(
    op: BinaryOp,
    a: &Storage,
    al: &Layout,
    b: &Storage,
    bl: &Layout,
    out: &Storage,
) {
    let am = a.memory();
    let bm = b.memory();
    let om = out.memory();
    let apply = |x: T, y: T| match op {
        BinaryOp::Add => x + y,
        BinaryOp::Sub => x - y,
        BinaryOp::Mul => x * y,
        BinaryOp::Div => x / y, // IEEE semantics: inf/nan on zero divisors
    };
    for (i, (ai, bi)) in al.iter().zip(bl.iter()).enumerate() {
        T::store(om, i, apply(T::load(am, ai), T::load(bm, bi)));
    }
}

fn binary_kernel_i64(op: BinaryOp, a: &Storage, al: &Layout, b: &Storage, bl: &Layout, out: &Storage) {
    let am = a.memory();
    let bm = b.memory();
    let om = out.memory();
    for (i, (ai, bi)) in al.iter().zip(bl.iter()).enumerate() {
        let x = am.read_i64(ai);
        let y = bm.read_i64(bi);
        let v = match op {
            BinaryOp::Add => x.wrapping_add(y),
            BinaryOp::Sub => x.wrapping_sub(y),
            BinaryOp::Mul => x.wrapping_mul(y),
            BinaryOp::Div => x.wrapping_div(y), // zero divisors rejected before enqueue
        };
        om.write_i64(i, v);
    }
}

pub(crate) fn binary(op: BinaryOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let work = begin(op.name());
    same_runtime(a, b)?;
    require_same_dtype(a, b)?;
    let dtype = a.dtype();
    if dtype == DType::Bool {
        return Err(Error::UnsupportedDType {
            op: op.name(),
            dtype,
        });
    }
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let al = a.layout().broadcast_to(&out_shape)?;
    let bl = b.layout().broadcast_to(&out_shape)?;
    let mut out = Tensor::empty(a.runtime(), &out_shape, dtype)?;

    if dtype == DType::I64 {
        // Integer division by zero is an error, which means the divisor
        // values must be inspected: run this op eagerly.
        a.runtime().synchronize();
        if op == BinaryOp::Div {
            let bm = b.storage().memory();
            if bl.iter().any(|i| bm.read_i64(i) == 0) {
                return Err(Error::DivisionByZero);
            }
        }
        binary_kernel_i64(op, a.storage(), &al, b.storage(), &bl, out.storage());
        return Ok(out);
    }

    let (sa, sb, so) = (a.storage().clone(), b.storage().clone(), out.storage().clone());
    launch(work, &[a.storage(), b.storage(), out.storage()], move || {
        match dtype {
            DType::F32 => binary_kernel_float::<f32>(op, &sa, &al, &sb, &bl, &so),
            DType::F64 => binary_kernel_float::<f64>(op, &sa, &al, &sb, &bl, &so),
            _ => unreachable!(),
        }
    })?;

    let a_shape = a.shape().to_vec();
    let b_shape = b.shape().to_vec();
    match op {
        BinaryOp::Add => record_op1("add", &[a, b], &mut out, vec![], move |_: &SavedCtx, up: &[Tensor]| {
            Ok(vec![
                Some(sum_to(&up[0], &a_shape)?),
                Some(sum_to(&up[0], &b_shape)?),
            ])
        }),
        BinaryOp::Sub => record_op1("sub", &[a, b], &mut out, vec![], move |_: &SavedCtx, up: &[Tensor]| {
            Ok(vec![
                Some(sum_to(&up[0], &a_shape)?),
                Some(sum_to(&up[0].neg()?, &b_shape)?),
            ])
        }),
        BinaryOp::Mul => record_op1(
            "mul",
            &[a, b],
            &mut out,
            vec![SavedTensor::new(a), SavedTensor::new(b)],
            move |saved: &SavedCtx, up: &[Tensor]| {
                let (a, b) = (saved.get(0)?, saved.get(1)?);
                Ok(vec![
                    Some(sum_to(&up[0].mul(&b)?, &a_shape)?),
                    Some(sum_to(&up[0].mul(&a)?, &b_shape)?),
                ])
            },
        ),
        BinaryOp::Div => record_op1(
            "div",
            &[a, b],
            &mut out,
            vec![SavedTensor::new(a), SavedTensor::new(b)],
            move |saved: &SavedCtx, up: &[Tensor]| {
                let (a, b) = (saved.get(0)?, saved.get(1)?);
                let da = up[0].div(&b)?;
                // db = -g * a / b^2
                let db = up[0].mul(&a)?.div(&b.mul(&b)?)?.neg()?;
                Ok(vec![
                    Some(sum_to(&da, &a_shape)?),
                    Some(sum_to(&db, &b_shape)?),
                ])
            },
        ),
    }
    Ok(out)
}

fn unary_kernel<T: FloatElement>(op: UnaryOp, a: &Storage, al: &Layout, out: &Storage) {
    let am = a.memory();
    let om = out.memory();
    let apply = |x: T| match op {
        UnaryOp::Neg => -x,
        UnaryOp::Exp => x.exp(),
        UnaryOp::Log => x.ln(),
        UnaryOp::Relu => {
            if x > T::ZERO {
                x
            } else {
                T::ZERO
            }
        }
        UnaryOp::Sqrt => x.sqrt(),
    };
    for (i, ai) in al.iter().enumerate() {
        T::store(om, i, apply(T::load(am, ai)));
    }
}

pub(crate) fn unary(op: UnaryOp, a: &Tensor) -> Result<Tensor> {
    let work = begin(op.name());
    let dtype = a.dtype();
    let int_ok = matches!(op, UnaryOp::Neg | UnaryOp::Relu) && dtype == DType::I64;
    if !dtype.is_float() && !int_ok {
        return Err(Error::UnsupportedDType {
            op: op.name(),
            dtype,
        });
    }
    let mut out = Tensor::empty(a.runtime(), a.shape(), dtype)?;
    let (sa, al, so) = (a.storage().clone(), a.layout(), out.storage().clone());
    launch(work, &[a.storage(), out.storage()], move || match dtype {
        DType::F32 => unary_kernel::<f32>(op, &sa, &al, &so),
        DType::F64 => unary_kernel::<f64>(op, &sa, &al, &so),
        DType::I64 => {
            let am = sa.memory();
            let om = so.memory();
            for (i, ai) in al.iter().enumerate() {
                let x = am.read_i64(ai);
                let v = match op {
                    UnaryOp::Neg => x.wrapping_neg(),
                    UnaryOp::Relu => x.max(0),
                    _ => unreachable!(),
                };
                om.write_i64(i, v);
            }
        }
        DType::Bool => unreachable!(),
    })?;

    match op {
        UnaryOp::Neg => record_op1("neg", &[a], &mut out, vec![], |_: &SavedCtx, up: &[Tensor]| {
            Ok(vec![Some(up[0].neg()?)])
        }),
        UnaryOp::Exp => {
            // d exp = g * exp(x): save the output
            let saved = vec![SavedTensor::new(&out)];
            record_op1("exp", &[a], &mut out, saved, |saved: &SavedCtx, up: &[Tensor]| {
                Ok(vec![Some(up[0].mul(&saved.get(0)?)?)])
            })
        }
        UnaryOp::Log => record_op1(
            "log",
            &[a],
            &mut out,
            vec![SavedTensor::new(a)],
            |saved: &SavedCtx, up: &[Tensor]| Ok(vec![Some(up[0].div(&saved.get(0)?)?)]),
        ),
        UnaryOp::Relu => record_op1(
            "relu",
            &[a],
            &mut out,
            vec![SavedTensor::new(a)],
            |saved: &SavedCtx, up: &[Tensor]| Ok(vec![Some(relu_grad(&saved.get(0)?, &up[0])?)]),
        ),
        UnaryOp::Sqrt => {
            let saved = vec![SavedTensor::new(&out)];
            record_op1("sqrt", &[a], &mut out, saved, |saved: &SavedCtx, up: &[Tensor]| {
                // d sqrt = g / (2 sqrt(x))
                let two_root = saved.get(0)?.mul_scalar(2.0)?;
                Ok(vec![Some(up[0].div(&two_root)?)])
            })
        }
    }
    Ok(out)
}

/// g where x > 0, else 0. The subgradient at exactly 0 is defined as 0.
fn relu_grad(x: &Tensor, g: &Tensor) -> Result<Tensor> {
    let work = begin("relu_backward");
    let dtype = x.dtype();
    let mut out = Tensor::empty(x.runtime(), x.shape(), dtype)?;
    let (xs, xl) = (x.storage().clone(), x.layout());
    let (gs, gl) = (g.storage().clone(), g.layout());
    let so = out.storage().clone();
    launch(work, &[x.storage(), g.storage(), out.storage()], move || {
        fn go<T: FloatElement>(
            xs: &Storage,
            xl: &Layout,
            gs: &Storage,
            gl: &Layout,
            so: &Storage,
        ) {
            let xm = xs.memory();
            let gm = gs.memory();
            let om = so.memory();
            for (i, (xi, gi)) in xl.iter().zip(gl.iter()).enumerate() {
                let v = if T::load(xm, xi) > T::ZERO {
                    T::load(gm, gi)
                } else {
                    T::ZERO
                };
                T::store(om, i, v);
            }
        }
        match dtype {
            DType::F32 => go::<f32>(&xs, &xl, &gs, &gl, &so),
            DType::F64 => go::<f64>(&xs, &xl, &gs, &gl, &so),
            _ => unreachable!(),
        }
    })?;
    out.set_autograd_meta(None);
    Ok(out)
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary(BinaryOp::Add, self, other)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary(BinaryOp::Sub, self, other)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary(BinaryOp::Mul, self, other)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        binary(BinaryOp::Div, self, other)
    }

    pub fn binary_op(&self, op: BinaryOp, other: &Tensor) -> Result<Tensor> {
        binary(op, self, other)
    }

    pub fn neg(&self) -> Result<Tensor> {
        unary(UnaryOp::Neg, self)
    }

    pub fn exp(&self) -> Result<Tensor> {
        unary(UnaryOp::Exp, self)
    }

    pub fn log(&self) -> Result<Tensor> {
        unary(UnaryOp::Log, self)
    }

    pub fn relu(&self) -> Result<Tensor> {
        unary(UnaryOp::Relu, self)
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        unary(UnaryOp::Sqrt, self)
    }

    pub fn unary_op(&self, op: UnaryOp) -> Result<Tensor> {
        unary(op, self)
    }

    /// Elementwise combination with a scalar, broadcast from a rank-0
    /// tensor of the same dtype.
    pub fn add_scalar(&self, s: f64) -> Result<Tensor> {
        let scalar = Tensor::scalar(self.runtime(), s, self.dtype())?;
        self.add(&scalar)
    }

    pub fn mul_scalar(&self, s: f64) -> Result<Tensor> {
        let scalar = Tensor::scalar(self.runtime(), s, self.dtype())?;
        self.mul(&scalar)
    }
}
