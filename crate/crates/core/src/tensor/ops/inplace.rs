//! In-place mutation ops and dropout.
//!
//! Every in-place op bumps the target storage's version exactly once. In
//! grad mode, mutating a leaf that requires grad (or any view of its
//! storage) is an error; mutating a grad-carrying intermediate is recorded
//! on the tape (the handle's history is rebased onto the new node) so later
//! uses differentiate correctly; mutating plain tensors relies on saved-
//! version checks to flag stale reads.

use super::{begin, launch, record_op1, require_same_dtype, same_runtime, sum_to};
use crate::autograd::{self, SavedCtx, SavedTensor};
use crate::dtype::DType;
use crate::error::{Error, Result};
use crate::rng::Xoshiro256StarStar;
use crate::tensor::element::FloatElement;
use crate::tensor::{Layout, Storage, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum InplaceKind {
    Add,
    Mul,
    Zero,
    Copy,
    AddScaled,
}

impl InplaceKind {
    fn name(self) -> &'static str {
        match self {
            InplaceKind::Add => "add_",
            InplaceKind::Mul => "mul_",
            InplaceKind::Zero => "zero_",
            InplaceKind::Copy => "copy_",
            InplaceKind::AddScaled => "add_scaled_",
        }
    }
}

fn inplace_kernel<T: FloatElement>(
    kind: InplaceKind,
    target: &Storage,
    tl: &Layout,
    operand: Option<(&Storage, &Layout)>,
    alpha: f64,
) {
    let tm = target.memory();
    let alpha = T::from_f64(alpha);
    match operand {
        None => {
            for ti in tl.iter() {
                T::store(tm, ti, T::ZERO);
            }
        }
        Some((os, ol)) => {
            let om = os.memory();
            for (ti, oi) in tl.iter().zip(ol.iter()) {
                let t = T::load(tm, ti);
                let o = T::load(om, oi);
                let v = match kind {
                    InplaceKind::Add => t + o,
                    InplaceKind::Mul => t * o,
                    InplaceKind::Copy => o,
                    InplaceKind::AddScaled => t + alpha * o,
                    InplaceKind::Zero => unreachable!(),
                };
                T::store(tm, ti, v);
            }
        }
    }
}

fn inplace_kernel_i64(
    kind: InplaceKind,
    target: &Storage,
    tl: &Layout,
    operand: Option<(&Storage, &Layout)>,
    alpha: f64,
) {
    let tm = target.memory();
    match operand {
        None => {
            for ti in tl.iter() {
                tm.write_i64(ti, 0);
            }
        }
        Some((os, ol)) => {
            let om = os.memory();
            for (ti, oi) in tl.iter().zip(ol.iter()) {
                let t = tm.read_i64(ti);
                let o = om.read_i64(oi);
                let v = match kind {
                    InplaceKind::Add => t.wrapping_add(o),
                    InplaceKind::Mul => t.wrapping_mul(o),
                    InplaceKind::Copy => o,
                    InplaceKind::AddScaled => t.wrapping_add((alpha as i64).wrapping_mul(o)),
                    InplaceKind::Zero => unreachable!(),
                };
                tm.write_i64(ti, v);
            }
        }
    }
}

fn apply_inplace(
    kind: InplaceKind,
    target: &mut Tensor,
    operand: Option<&Tensor>,
    alpha: f64,
) -> Result<()> {
    let work = begin(kind.name());
    let grad_mode = autograd::grad_enabled();
    if grad_mode && target.storage().is_grad_leaf() {
        return Err(Error::InplaceOnLeafRequiringGrad);
    }
    let dtype = target.dtype();
    let mut operand_bc: Option<(Tensor, Layout)> = None;
    if let Some(o) = operand {
        same_runtime(target, o)?;
        require_same_dtype(target, o)?;
        let ol = o.layout().broadcast_to(target.shape())?;
        operand_bc = Some((o.clone(), ol));
    }
    if dtype == DType::Bool {
        return Err(Error::UnsupportedDType {
            op: kind.name(),
            dtype,
        });
    }

    // Rebase first (it may need the pre-mutation value), then mutate.
    let rebase = grad_mode && target.requires_grad();
    let mut pre_copy: Option<Tensor> = None;
    if rebase
        && kind == InplaceKind::Mul
        && operand.is_some_and(Tensor::requires_grad)
    {
        // mul_ destroys the value its operand's gradient needs; force a
        // real copy (Tensor::contiguous would alias a contiguous target)
        pre_copy = Some(super::materialize_contiguous(target)?.detach());
    }

    let tl = target.layout();
    let (ts, os_ol) = (
        target.storage().clone(),
        operand_bc
            .as_ref()
            .map(|(o, ol)| (o.storage().clone(), ol.clone())),
    );
    let mut touched: Vec<&Storage> = vec![target.storage()];
    if let Some(o) = operand {
        touched.push(o.storage());
    }
    launch(work, &touched, move || {
        let op_ref = os_ol.as_ref().map(|(s, l)| (s, l));
        match dtype {
            DType::F32 => inplace_kernel::<f32>(kind, &ts, &tl, op_ref, alpha),
            DType::F64 => inplace_kernel::<f64>(kind, &ts, &tl, op_ref, alpha),
            DType::I64 => inplace_kernel_i64(kind, &ts, &tl, op_ref, alpha),
            DType::Bool => unreachable!(),
        }
    })?;
    // one version bump per completed mutating op, observable immediately
    target.storage().bump_version();

    if rebase {
        rebase_history(kind, target, operand, alpha, pre_copy)?;
    }
    Ok(())
}

/// Record the mutation as a differentiable op and point the mutated handle
/// at the new node. Gradients flowing through later uses of the handle now
/// include the mutation.
fn rebase_history(
    kind: InplaceKind,
    target: &mut Tensor,
    operand: Option<&Tensor>,
    alpha: f64,
    pre_copy: Option<Tensor>,
) -> Result<()> {
    let old_history = target.clone(); // carries the pre-mutation node
    let o_shape = operand.map(|o| o.shape().to_vec());
    let mut rebased = target.clone();
    match kind {
        InplaceKind::Zero => {
            record_op1("zero_", &[&old_history], &mut rebased, vec![], move |_: &SavedCtx, _: &[Tensor]| {
                Ok(vec![None]) // output independent of the overwritten value
            });
        }
        InplaceKind::Add => {
            let o_shape = o_shape.expect("add_ has an operand");
            record_op1(
                "add_",
                &[&old_history, operand.unwrap()],
                &mut rebased,
                vec![],
                move |_: &SavedCtx, up: &[Tensor]| {
                    Ok(vec![Some(up[0].clone()), Some(sum_to(&up[0], &o_shape)?)])
                },
            );
        }
        InplaceKind::AddScaled => {
            let o_shape = o_shape.expect("add_scaled_ has an operand");
            record_op1(
                "add_scaled_",
                &[&old_history, operand.unwrap()],
                &mut rebased,
                vec![],
                move |_: &SavedCtx, up: &[Tensor]| {
                    let dop = sum_to(&up[0].mul_scalar(alpha)?, &o_shape)?;
                    Ok(vec![Some(up[0].clone()), Some(dop)])
                },
            );
        }
        InplaceKind::Mul => {
            let o = operand.unwrap();
            let o_shape = o_shape.expect("mul_ has an operand");
            let mut saved = vec![SavedTensor::new(o)];
            if let Some(pre) = &pre_copy {
                saved.push(SavedTensor::new(pre));
            }
            let has_pre = pre_copy.is_some();
            record_op1(
                "mul_",
                &[&old_history, o],
                &mut rebased,
                saved,
                move |saved: &SavedCtx, up: &[Tensor]| {
                    let o = saved.get(0)?;
                    let dt = up[0].mul(&o)?;
                    let dop = if has_pre {
                        let pre = saved.get(1)?;
                        Some(sum_to(&up[0].mul(&pre)?, &o_shape)?)
                    } else {
                        None
                    };
                    Ok(vec![Some(dt), dop])
                },
            );
        }
        InplaceKind::Copy => {
            let o = operand.unwrap();
            let o_shape = o_shape.expect("copy_ has an operand");
            record_op1(
                "copy_",
                &[&old_history, o],
                &mut rebased,
                vec![],
                move |_: &SavedCtx, up: &[Tensor]| {
                    Ok(vec![None, Some(sum_to(&up[0], &o_shape)?)])
                },
            );
        }
    }
    *target = rebased;
    Ok(())
}

impl Tensor {
    /// `self += other` (broadcast), in place.
    pub fn add_(&mut self, other: &Tensor) -> Result<()> {
        apply_inplace(InplaceKind::Add, self, Some(other), 0.0)
    }

    /// `self *= other` (broadcast), in place.
    pub fn mul_(&mut self, other: &Tensor) -> Result<()> {
        apply_inplace(InplaceKind::Mul, self, Some(other), 0.0)
    }

    /// `self += alpha * other` (broadcast), in place.
    pub fn add_scaled_(&mut self, other: &Tensor, alpha: f64) -> Result<()> {
        apply_inplace(InplaceKind::AddScaled, self, Some(other), alpha)
    }

    /// Overwrite with zeros, in place.
    pub fn zero_(&mut self) -> Result<()> {
        apply_inplace(InplaceKind::Zero, self, None, 0.0)
    }

    /// Overwrite with `src` (broadcast), in place.
    pub fn copy_(&mut self, src: &Tensor) -> Result<()> {
        apply_inplace(InplaceKind::Copy, self, Some(src), 0.0)
    }

    pub fn add_scalar_(&mut self, s: f64) -> Result<()> {
        let scalar = Tensor::scalar(self.runtime(), s, self.dtype())?;
        self.add_(&scalar)
    }

    pub fn mul_scalar_(&mut self, s: f64) -> Result<()> {
        let scalar = Tensor::scalar(self.runtime(), s, self.dtype())?;
        self.mul_(&scalar)
    }

    /// Zero elements with probability `p` and scale survivors by
    /// `1/(1-p)`. `training = false` is the identity. The mask depends
    /// only on `(shape, seed)`; backward reuses the identical mask.
    pub fn dropout(&self, p: f64, training: bool, seed: u64) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidProbability(p));
        }
        super::require_float("dropout", self)?;
        if !training {
            return Ok(self.clone());
        }
        let work = begin("dropout");
        let dtype = self.dtype();
        let mut out = Tensor::empty(self.runtime(), self.shape(), dtype)?;
        // the mask is materialized so backward applies the exact same one
        let mask = Tensor::empty(self.runtime(), self.shape(), dtype)?;
        let (sx, lx) = (self.storage().clone(), self.layout());
        let so = out.storage().clone();
        let sm = mask.storage().clone();
        launch(
            work,
            &[self.storage(), out.storage(), mask.storage()],
            move || {
                fn go<T: FloatElement>(
                    sx: &Storage,
                    lx: &Layout,
                    so: &Storage,
                    sm: &Storage,
                    p: f64,
                    seed: u64,
                ) {
                    let xm = sx.memory();
                    let om = so.memory();
                    let mm = sm.memory();
                    let scale = T::from_f64(1.0 / (1.0 - p));
                    let mut rng = Xoshiro256StarStar::new(seed);
                    for (i, xi) in lx.iter().enumerate() {
                        let keep = rng.next_f64() >= p;
                        let m = if keep { scale } else { T::ZERO };
                        T::store(mm, i, m);
                        T::store(om, i, T::load(xm, xi) * m);
                    }
                }
                match dtype {
                    DType::F32 => go::<f32>(&sx, &lx, &so, &sm, p, seed),
                    DType::F64 => go::<f64>(&sx, &lx, &so, &sm, p, seed),
                    _ => unreachable!(),
                }
            },
        )?;
        let saved = vec![SavedTensor::new(&mask)];
        record_op1("dropout", &[self], &mut out, saved, |saved: &SavedCtx, up: &[Tensor]| {
            Ok(vec![Some(up[0].mul(&saved.get(0)?)?)])
        });
        Ok(out)
    }
}
