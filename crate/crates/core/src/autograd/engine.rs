//! The backward pass: reverse topological traversal over the recorded
//! graph with pending-dependency counting.

use super::node::{Edge, GradNode};
use super::GradModeGuard;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

/// `backward(root)`: propagate from a scalar root with an implicit
/// upstream of ones.
pub fn backward(root: &Tensor) -> Result<()> {
    backward_with(root, None, false)
}

/// Full-control backward. `upstream` is required (and shape-checked) for
/// non-scalar roots. Without `retain` the graph is consumed: saved tensors
/// are released and a second backward over it fails.
pub fn backward_with(root: &Tensor, upstream: Option<&Tensor>, retain: bool) -> Result<()> {
    let meta = root.autograd_meta().ok_or(Error::RootRequiresNoGrad)?;
    let seed_grad = match upstream {
        Some(u) => {
            if u.shape() != root.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "upstream gradient {:?} does not match root {:?}",
                    u.shape(),
                    root.shape()
                )));
            }
            u.detach()
        }
        None => {
            if !root.is_scalar_shaped() {
                return Err(Error::MissingUpstreamForNonScalar);
            }
            Tensor::ones(root.runtime(), &[], root.dtype())?
        }
    };

    // gradients are data, not part of the recorded program
    let _guard = GradModeGuard::disable();

    let (anchor, anchor_output) = match meta.node() {
        None => {
            // leaf root: the upstream is the gradient
            return meta.accumulate(seed_grad);
        }
        Some((node, output)) => (node.clone(), *output),
    };

    let mut engine = Engine::new(retain);
    engine.discover(&anchor);
    engine.contribute(&anchor, anchor_output, seed_grad)?;
    engine.run(key_of(&anchor))
}

type NodeKey = usize;

fn key_of(node: &Arc<GradNode>) -> NodeKey {
    Arc::as_ptr(node) as NodeKey
}

struct Engine {
    retain: bool,
    pending: HashMap<NodeKey, usize>,
    nodes: HashMap<NodeKey, Arc<GradNode>>,
    buffers: HashMap<NodeKey, Vec<Option<Tensor>>>,
    ready: VecDeque<NodeKey>,
}

impl Engine {
    fn new(retain: bool) -> Self {
        Engine {
            retain,
            pending: HashMap::new(),
            nodes: HashMap::new(),
            buffers: HashMap::new(),
            ready: VecDeque::new(),
        }
    }

    /// Count, for every node reachable from `anchor`, how many consumer
    /// edges will deliver a contribution to it.
    fn discover(&mut self, anchor: &Arc<GradNode>) {
        let mut stack = vec![anchor.clone()];
        self.pending.insert(key_of(anchor), 0);
        self.nodes.insert(key_of(anchor), anchor.clone());
        while let Some(node) = stack.pop() {
            for edge in node.edges().iter().flatten() {
                if let Edge::Node(target, _) = edge {
                    let k = key_of(target);
                    if let Some(p) = self.pending.get_mut(&k) {
                        *p += 1;
                    } else {
                        self.pending.insert(k, 1);
                        self.nodes.insert(k, target.clone());
                        stack.push(target.clone());
                    }
                }
            }
        }
    }

    /// Add a gradient for one output slot of `node`.
    fn contribute(&mut self, node: &Arc<GradNode>, output: usize, grad: Tensor) -> Result<()> {
        let buf = self
            .buffers
            .entry(key_of(node))
            .or_insert_with(|| vec![None; node.n_outputs()]);
        buf[output] = match buf[output].take() {
            None => Some(grad),
            Some(existing) => Some(existing.add(&grad)?),
        };
        Ok(())
    }

    fn arrive(&mut self, node_key: NodeKey) {
        let p = self.pending.get_mut(&node_key).expect("discovered node");
        debug_assert!(*p > 0);
        *p -= 1;
        if *p == 0 {
            self.ready.push_back(node_key);
        }
    }

    fn run(&mut self, anchor_key: NodeKey) -> Result<()> {
        // the anchor always starts ready: nothing reachable consumes it
        debug_assert_eq!(self.pending[&anchor_key], 0);
        self.ready.push_back(anchor_key);

        while let Some(k) = self.ready.pop_front() {
            let node = self.nodes[&k].clone();
            let upstream = self.buffers.remove(&k).unwrap_or_default();
            let grads: Option<Vec<Option<Tensor>>> =
                if upstream.is_empty() || upstream.iter().all(Option::is_none) {
                    // no gradient flowed here; release the payload and
                    // pass nothing on
                    node.consume_payload(!self.retain)?;
                    None
                } else {
                    let materialized = materialize(&node, upstream)?;
                    Some(node.run_vjp(&materialized, !self.retain)?)
                };
            for (i, edge) in node.edges().iter().enumerate() {
                let Some(edge) = edge else { continue };
                let grad = grads.as_ref().and_then(|g| g[i].clone());
                match edge {
                    Edge::Leaf(meta) => {
                        if let Some(g) = grad {
                            meta.accumulate(g)?;
                        }
                    }
                    Edge::Node(target, output) => {
                        if let Some(g) = grad {
                            debug_assert_eq!(
                                g.shape(),
                                target.output_meta(*output).0,
                                "vjp of `{}` produced a misshapen gradient",
                                node.op_name()
                            );
                            self.contribute(target, *output, g)?;
                        }
                        self.arrive(key_of(target));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Replace missing output gradients by zeros so VJPs always see a full
/// upstream vector. At least one slot is present when this is called.
fn materialize(node: &Arc<GradNode>, upstream: Vec<Option<Tensor>>) -> Result<Vec<Tensor>> {
    let rt = upstream
        .iter()
        .flatten()
        .next()
        .expect("at least one upstream gradient")
        .runtime()
        .clone();
    upstream
        .into_iter()
        .enumerate()
        .map(|(i, g)| match g {
            Some(g) => Ok(g),
            None => {
                let (shape, dtype) = node.output_meta(i);
                Tensor::zeros(&rt, shape, dtype)
            }
        })
        .collect()
}

/// Accumulate `g` into a leaf's `.grad` (`+=` semantics).
pub fn accumulate_grad(leaf: &Tensor, g: &Tensor) -> Result<()> {
    let meta = leaf.autograd_meta().ok_or(Error::RootRequiresNoGrad)?;
    if !meta.is_leaf() {
        return Err(Error::RootRequiresNoGrad);
    }
    meta.accumulate(g.clone())
}
