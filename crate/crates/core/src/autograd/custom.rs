//! User-extensible differentiable functions.

use super::node::{AutogradMeta, Edge, GradNode, SavedCtx, SavedTensor};
use super::{grad_enabled, GradModeGuard};
use crate::error::Result;
use crate::tensor::Tensor;
use std::any::Any;
use std::sync::Arc;

/// A differentiable op defined outside the built-in set: `forward` computes
/// outputs, `backward` maps upstream gradients to one gradient (or `None`)
/// per input — the vector-Jacobian product.
pub trait CustomFunction: Send + Sync + 'static {
    fn name(&self) -> &'static str {
        "custom"
    }

    fn forward(&self, ctx: &mut FunctionContext, inputs: &[Tensor]) -> Result<Vec<Tensor>>;

    fn backward(&self, ctx: &BackwardContext<'_>, upstream: &[Tensor])
        -> Result<Vec<Option<Tensor>>>;
}

/// Forward-side context: stash tensors (version-pinned) and arbitrary
/// values for backward.
#[derive(Default)]
pub struct FunctionContext {
    saved: Vec<SavedTensor>,
    values: Vec<Box<dyn Any + Send + Sync>>,
}

impl FunctionContext {
    pub fn save_tensor(&mut self, t: &Tensor) {
        self.saved.push(SavedTensor::new(t));
    }

    pub fn save_value<T: Any + Send + Sync>(&mut self, value: T) {
        self.values.push(Box::new(value));
    }
}

/// Backward-side context: saved tensors come back version-checked.
pub struct BackwardContext<'a> {
    saved: &'a SavedCtx,
    values: &'a [Box<dyn Any + Send + Sync>],
}

impl BackwardContext<'_> {
    /// The `i`-th tensor saved in forward. Fails with `VersionMismatch`
    /// if its storage was mutated since.
    pub fn saved_tensor(&self, i: usize) -> Result<Tensor> {
        self.saved.get(i)
    }

    pub fn saved_value<T: Any>(&self, i: usize) -> Option<&T> {
        self.values.get(i).and_then(|v| v.downcast_ref::<T>())
    }
}

/// Run a custom function: forward executes with recording suspended, then
/// a node wrapping its backward is attached to every output. A backward
/// returning the wrong gradient count fails there with `ArityMismatch`.
pub fn apply_custom(f: Arc<dyn CustomFunction>, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut ctx = FunctionContext::default();
    let mut outputs = {
        let _inner = GradModeGuard::disable();
        f.forward(&mut ctx, inputs)?
    };
    if !grad_enabled() || !inputs.iter().any(Tensor::requires_grad) {
        return Ok(outputs);
    }
    let edges = inputs.iter().map(Edge::for_tensor).collect();
    let metas = outputs
        .iter()
        .map(|o| (o.shape().to_vec(), o.dtype()))
        .collect();
    let FunctionContext { saved, values } = ctx;
    let func = f.clone();
    let vjp = move |saved: &SavedCtx, upstream: &[Tensor]| {
        let bctx = BackwardContext {
            saved,
            values: &values,
        };
        func.backward(&bctx, upstream)
    };
    let node = GradNode::new(f.name(), edges, metas, saved, Box::new(vjp));
    for (i, out) in outputs.iter_mut().enumerate() {
        if out.dtype().is_float() {
            out.set_autograd_meta(Some(Arc::new(AutogradMeta::from_node(node.clone(), i))));
        }
    }
    Ok(outputs)
}
