//! Tape nodes, edges, and version-pinned saved tensors.

use crate::dtype::DType;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::sync::{Arc, Mutex};

/// Per-tensor autograd state. Present iff the tensor requires grad.
/// A leaf has no producing node and owns a `.grad` slot.
pub struct AutogradMeta {
    node: Option<(Arc<GradNode>, usize)>,
    leaf_shape: Option<Vec<usize>>,
    grad: Mutex<Option<Tensor>>,
}

impl AutogradMeta {
    pub(crate) fn leaf_with_shape(shape: Vec<usize>) -> Self {
        AutogradMeta {
            node: None,
            leaf_shape: Some(shape),
            grad: Mutex::new(None),
        }
    }

    pub(crate) fn from_node(node: Arc<GradNode>, output: usize) -> Self {
        AutogradMeta {
            node: Some((node, output)),
            leaf_shape: None,
            grad: Mutex::new(None),
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.node.is_none()
    }

    pub(crate) fn node(&self) -> Option<&(Arc<GradNode>, usize)> {
        self.node.as_ref()
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.grad.lock().unwrap().clone()
    }

    pub fn clear_grad(&self) {
        *self.grad.lock().unwrap() = None;
    }

    /// Accumulate `g` into the leaf's grad slot (`+=` semantics, serialized
    /// per leaf by the slot's lock).
    pub(crate) fn accumulate(&self, g: Tensor) -> Result<()> {
        if let Some(expected) = &self.leaf_shape {
            if g.shape() != expected.as_slice() {
                return Err(Error::ShapeMismatch(format!(
                    "gradient of shape {:?} for leaf of shape {:?}",
                    g.shape(),
                    expected
                )));
            }
        }
        let mut slot = self.grad.lock().unwrap();
        let next = match slot.take() {
            None => g,
            Some(existing) => crate::autograd::no_grad(|| existing.add(&g))?,
        };
        *slot = Some(next);
        Ok(())
    }
}

/// Where one input's gradient flows: into another node's output slot, or
/// into a leaf's accumulator.
#[derive(Clone)]
pub enum Edge {
    Node(Arc<GradNode>, usize),
    Leaf(Arc<AutogradMeta>),
}

impl Edge {
    /// Edge for `input` if it participates in the graph.
    pub(crate) fn for_tensor(input: &Tensor) -> Option<Edge> {
        let meta = input.autograd_meta()?;
        match meta.node() {
            Some((node, output)) => Some(Edge::Node(node.clone(), *output)),
            None => Some(Edge::Leaf(meta.clone())),
        }
    }
}

/// A tensor pinned at the storage version it had when saved. Unpacking
/// checks the version still matches.
#[derive(Clone)]
pub struct SavedTensor {
    tensor: Tensor,
    expected_version: u64,
}

impl SavedTensor {
    pub fn new(t: &Tensor) -> Self {
        SavedTensor {
            tensor: t.clone(),
            expected_version: t.version(),
        }
    }

    pub fn expected_version(&self) -> u64 {
        self.expected_version
    }

    pub fn unpack(&self, op: &str) -> Result<Tensor> {
        let actual = self.tensor.version();
        if actual != self.expected_version {
            return Err(Error::VersionMismatch {
                op: op.to_string(),
                expected: self.expected_version,
                actual,
            });
        }
        Ok(self.tensor.clone())
    }
}

/// The saved tensors of a node, handed to its VJP at backward time.
/// Holds cheap handle clones, so the type carries no borrow lifetimes.
pub struct SavedCtx {
    op: String,
    saved: Vec<SavedTensor>,
}

impl SavedCtx {
    pub fn get(&self, i: usize) -> Result<Tensor> {
        self.saved[i].unpack(&self.op)
    }

    pub fn len(&self) -> usize {
        self.saved.len()
    }

    pub fn is_empty(&self) -> bool {
        self.saved.is_empty()
    }
}

/// The backward rule of one recorded op: upstream output gradients in,
/// one gradient (or none) per input out.
pub trait VjpFn: Send + Sync {
    fn call(&self, saved: &SavedCtx, upstream: &[Tensor]) -> Result<Vec<Option<Tensor>>>;
}

impl<F> VjpFn for F
where
    F: Fn(&SavedCtx, &[Tensor]) -> Result<Vec<Option<Tensor>>> + Send + Sync,
{
    fn call(&self, saved: &SavedCtx, upstream: &[Tensor]) -> Result<Vec<Option<Tensor>>> {
        self(saved, upstream)
    }
}

/// What backward consumes: dropped (releasing saved storage) once the node
/// has run, unless the caller retains the graph.
pub struct NodePayload {
    pub(crate) saved: Vec<SavedTensor>,
    pub(crate) vjp: Box<dyn VjpFn>,
}

/// One recorded op on the tape. Holds edges toward its inputs and no
/// strong reference to its outputs, so graphs die with the tensors that
/// reference them.
pub struct GradNode {
    op_name: String,
    edges: Vec<Option<Edge>>,
    output_metas: Vec<(Vec<usize>, DType)>,
    payload: Mutex<Option<NodePayload>>,
}

impl GradNode {
    pub(crate) fn new(
        op_name: impl Into<String>,
        edges: Vec<Option<Edge>>,
        output_metas: Vec<(Vec<usize>, DType)>,
        saved: Vec<SavedTensor>,
        vjp: Box<dyn VjpFn>,
    ) -> Arc<Self> {
        Arc::new(GradNode {
            op_name: op_name.into(),
            edges,
            output_metas,
            payload: Mutex::new(Some(NodePayload { saved, vjp })),
        })
    }

    pub fn op_name(&self) -> &str {
        &self.op_name
    }

    pub(crate) fn edges(&self) -> &[Option<Edge>] {
        &self.edges
    }

    pub(crate) fn n_outputs(&self) -> usize {
        self.output_metas.len()
    }

    pub(crate) fn output_meta(&self, i: usize) -> (&[usize], DType) {
        let (shape, dtype) = &self.output_metas[i];
        (shape, *dtype)
    }

    /// Run the node's VJP. `consume` drops the payload afterwards; a second
    /// visit then fails.
    pub(crate) fn run_vjp(
        &self,
        upstream: &[Tensor],
        consume: bool,
    ) -> Result<Vec<Option<Tensor>>> {
        let mut slot = self.payload.lock().unwrap();
        let payload = slot.as_ref().ok_or(Error::DoubleBackwardWithoutRetain)?;
        let saved = SavedCtx {
            op: self.op_name.clone(),
            saved: payload.saved.clone(),
        };
        let grads = payload.vjp.call(&saved, upstream)?;
        if grads.len() != self.edges.len() {
            return Err(Error::ArityMismatch {
                op: self.op_name.clone(),
                expected: self.edges.len(),
                got: grads.len(),
            });
        }
        if consume {
            *slot = None;
        }
        Ok(grads)
    }

    /// Consume (or, when retaining, just check) the payload without
    /// running the VJP. Used when no gradient reached this node.
    pub(crate) fn consume_payload(&self, consume: bool) -> Result<()> {
        let mut slot = self.payload.lock().unwrap();
        if slot.is_none() {
            return Err(Error::DoubleBackwardWithoutRetain);
        }
        if consume {
            *slot = None;
        }
        Ok(())
    }
}

impl std::fmt::Debug for GradNode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GradNode")
            .field("op", &self.op_name)
            .field("inputs", &self.edges.len())
            .field("outputs", &self.output_metas.len())
            .finish()
    }
}
