//! Minimal reverse-mode autodiff over flat row-major tensors.
//!
//! A [`Tape`] records a dynamic (define-by-run) graph: every operation
//! evaluates eagerly and pushes one node holding the forward value plus a
//! boxed backward rule. [`Tape::backward`] sweeps the arena in reverse
//! insertion order, which is a valid topological order because operations can
//! only reference earlier nodes.
//!
//! Gradients live in two places:
//! - scratch buffers during a single backward sweep (freed afterwards), and
//! - persistent per-leaf accumulators, which add up across `backward` calls
//!   so that running backward twice doubles leaf gradients.
//!
//! A graph is confined to one thread from construction through backward;
//! parallelism happens across independent tapes, never inside one.

mod check;
mod ops;
mod param;

pub use check::finite_difference_check;
pub use param::{Bound, Init, LinearLayer, Param, ParamId, ParamSet};

use crate::{Error, Real, Result};

/// Handle to a node in a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) struct NodeValue {
    pub(crate) data: Vec<Real>,
    pub(crate) shape: Vec<usize>,
    pub(crate) requires_grad: bool,
}

/// Backward rule for one recorded operation. `grad_out` is dLoss/dOutput for
/// the node that owns this rule; implementations accumulate into the scratch
/// gradients of their inputs through `ctx`.
pub(crate) trait BackwardRule {
    fn backward(&self, grad_out: &[Real], ctx: &mut BwdCtx<'_>);
}

pub(crate) struct BwdCtx<'a> {
    values: &'a [NodeValue],
    scratch: &'a mut [Vec<Real>],
}

impl BwdCtx<'_> {
    pub(crate) fn value(&self, id: usize) -> &[Real] {
        &self.values[id].data
    }

    /// Scratch gradient buffer for node `id`, zero-initialized on first use.
    pub(crate) fn grad_mut(&mut self, id: usize) -> &mut [Real] {
        if self.scratch[id].is_empty() {
            let len = self.values[id].data.len();
            self.scratch[id] = vec![0.0; len];
        }
        &mut self.scratch[id]
    }

    /// Skip propagating into inputs that cannot carry gradients.
    pub(crate) fn needs_grad(&self, id: usize) -> bool {
        self.values[id].requires_grad
    }
}

pub struct Tape {
    values: Vec<NodeValue>,
    rules: Vec<Option<Box<dyn BackwardRule>>>,
    /// Persistent leaf gradients, accumulated across backward sweeps.
    leaf_grads: Vec<Vec<Real>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { values: Vec::new(), rules: Vec::new(), leaf_grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub(crate) fn push_node(
        &mut self,
        data: Vec<Real>,
        shape: Vec<usize>,
        requires_grad: bool,
        rule: Option<Box<dyn BackwardRule>>,
    ) -> Var {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.values.push(NodeValue { data, shape, requires_grad });
        self.rules.push(rule);
        self.leaf_grads.push(Vec::new());
        Var(self.values.len() - 1)
    }

    /// Gradient-bearing leaf (an input or parameter copy).
    pub fn leaf(&mut self, data: Vec<Real>, shape: Vec<usize>) -> Var {
        self.push_node(data, shape, true, None)
    }

    /// Constant: never receives gradient.
    pub fn constant(&mut self, data: Vec<Real>, shape: Vec<usize>) -> Var {
        self.push_node(data, shape, false, None)
    }

    pub fn scalar_const(&mut self, v: Real) -> Var {
        self.constant(vec![v], vec![1])
    }

    pub fn value(&self, v: Var) -> &[Real] {
        &self.values[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.values[v.0].shape
    }

    pub fn scalar_value(&self, v: Var) -> Real {
        debug_assert_eq!(self.values[v.0].data.len(), 1);
        self.values[v.0].data[0]
    }

    /// Accumulated gradient of a leaf, if any backward sweep reached it.
    pub fn grad(&self, v: Var) -> Option<&[Real]> {
        let g = &self.leaf_grads[v.0];
        if g.is_empty() {
            None
        } else {
            Some(g)
        }
    }

    pub(crate) fn requires_grad(&self, v: Var) -> bool {
        self.values[v.0].requires_grad
    }

    /// Reverse sweep from a scalar loss. Each node is visited exactly once;
    /// leaf gradients accumulate additively across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].data.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.values[loss.0].shape),
            ));
        }
        let n = loss.0 + 1;
        let mut scratch: Vec<Vec<Real>> = vec![Vec::new(); self.values.len()];
        scratch[loss.0] = vec![1.0];

        for id in (0..n).rev() {
            if scratch[id].is_empty() {
                continue;
            }
            if let Some(rule) = &self.rules[id] {
                let grad_out = std::mem::take(&mut scratch[id]);
                let mut ctx = BwdCtx { values: &self.values, scratch: &mut scratch };
                rule.backward(&grad_out, &mut ctx);
                scratch[id] = grad_out;
            }
        }

        for id in 0..n {
            if self.rules[id].is_none() && self.values[id].requires_grad && !scratch[id].is_empty()
            {
                if self.leaf_grads[id].is_empty() {
                    self.leaf_grads[id] = std::mem::take(&mut scratch[id]);
                } else {
                    for (acc, g) in self.leaf_grads[id].iter_mut().zip(&scratch[id]) {
                        *acc += *g;
                    }
                }
            }
        }
        Ok(())
    }
}
