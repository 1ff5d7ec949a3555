//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Tensors are 64-bit float, dense, and carry an implicit tape: every op
//! records its parents and a backward closure. Graphs are single-threaded;
//! parameters are leaf tensors whose values the optimizer mutates in place.

mod checkpoint;
mod ops;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use ops::scaled_dot_product_attention;

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward requires a scalar loss")]
    NonScalarLoss,
    #[error("tape already consumed by a previous backward")]
    StaleTape,
    #[error("parameter {0} has no gradient")]
    MissingGradient(String),
}

type BackwardFn = Box<dyn Fn(&[f64], &[Tensor])>;

pub(crate) struct Node {
    shape: Vec<usize>,
    values: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    back: Option<BackwardFn>,
    needs_grad: bool,
    consumed: Cell<bool>,
}

/// A dense n-dimensional array participating in the gradient tape.
///
/// Cloning is cheap (shared node). The graph is not `Send`.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("needs_grad", &self.node.needs_grad)
            .finish()
    }
}

impl Tensor {
    fn build(
        shape: Vec<usize>,
        values: Vec<f64>,
        parents: Vec<Tensor>,
        back: Option<BackwardFn>,
        needs_grad: bool,
    ) -> Tensor {
        assert_eq!(
            values.len(),
            shape.iter().product::<usize>(),
            "value count must match shape"
        );
        Tensor {
            node: Rc::new(Node {
                shape,
                values: RefCell::new(values),
                grad: RefCell::new(None),
                parents,
                back,
                needs_grad,
                consumed: Cell::new(false),
            }),
        }
    }

    /// A trainable leaf.
    pub fn parameter(shape: Vec<usize>, values: Vec<f64>) -> Tensor {
        Tensor::build(shape, values, Vec::new(), None, true)
    }

    /// A non-trainable leaf (inputs, masks, positional tables).
    pub fn constant(shape: Vec<usize>, values: Vec<f64>) -> Tensor {
        Tensor::build(shape, values, Vec::new(), None, false)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(vec![1], vec![v])
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        values: Vec<f64>,
        parents: Vec<Tensor>,
        back: BackwardFn,
    ) -> Tensor {
        let needs = parents.iter().any(|p| p.node.needs_grad);
        Tensor::build(shape, values, parents, Some(back), needs)
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.shape.iter().product()
    }

    pub fn data(&self) -> Vec<f64> {
        self.node.values.borrow().clone()
    }

    pub fn scalar_value(&self) -> f64 {
        assert_eq!(self.numel(), 1);
        self.node.values.borrow()[0]
    }

    /// Overwrite leaf values (optimizer steps, checkpoint loads, finite
    /// differences). Panics on shape mismatch.
    pub fn set_data(&self, values: &[f64]) {
        let mut v = self.node.values.borrow_mut();
        assert_eq!(v.len(), values.len());
        v.copy_from_slice(values);
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn take_grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow_mut().take()
    }

    pub fn clear_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Zero-initialize the gradient buffer (batch accumulation starts here).
    pub fn init_grad(&self) {
        *self.node.grad.borrow_mut() = Some(vec![0.0; self.numel()]);
    }

    pub fn needs_grad(&self) -> bool {
        self.node.needs_grad
    }

    pub(crate) fn id(&self) -> usize {
        Rc::as_ptr(&self.node) as usize
    }

    pub(crate) fn values_ref(&self) -> std::cell::Ref<'_, Vec<f64>> {
        self.node.values.borrow()
    }

    /// Accumulate `delta` into this tensor's gradient buffer. No-op for
    /// tensors outside the differentiable subgraph.
    pub(crate) fn accumulate_grad(&self, delta: impl Iterator<Item = f64>) {
        if !self.node.needs_grad {
            return;
        }
        let mut g = self.node.grad.borrow_mut();
        let buf = g.get_or_insert_with(|| vec![0.0; self.numel()]);
        for (slot, d) in buf.iter_mut().zip(delta) {
            *slot += d;
        }
    }

    pub(crate) fn with_grad_mut(&self, f: impl FnOnce(&mut [f64])) {
        if !self.node.needs_grad {
            return;
        }
        let mut g = self.node.grad.borrow_mut();
        let buf = g.get_or_insert_with(|| vec![0.0; self.numel()]);
        f(buf);
    }

    /// Reverse-mode pass: populate gradients of every reachable leaf that
    /// needs them. `self` must be scalar; a second call on the same graph
    /// without a fresh forward is a `StaleTape` error.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss);
        }
        if self.node.consumed.get() {
            return Err(TensorError::StaleTape);
        }
        self.node.consumed.set(true);

        // Iterative post-order topological sort over the needs-grad subgraph.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.id());
        while let Some((t, pi)) = stack.pop() {
            if pi < t.node.parents.len() {
                stack.push((t.clone(), pi + 1));
                let p = t.node.parents[pi].clone();
                if p.node.needs_grad && visited.insert(p.id()) {
                    stack.push((p, 0));
                }
            } else {
                order.push(t);
            }
        }

        self.accumulate_grad(std::iter::once(1.0));
        for t in order.iter().rev() {
            if let Some(back) = &t.node.back {
                let grad = t.node.grad.borrow().clone();
                if let Some(grad) = grad {
                    back(&grad, &t.node.parents);
                }
            }
        }
        Ok(())
    }
}

/// Plain gradient descent with multiplicative per-step learning-rate decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub learning_rate: f64,
    pub decay: f64,
    pub step_count: u64,
}

impl Optimizer {
    pub fn new(learning_rate: f64, decay: f64) -> Self {
        assert!(learning_rate > 0.0 && decay > 0.0 && decay <= 1.0);
        Optimizer {
            learning_rate,
            decay,
            step_count: 0,
        }
    }

    /// `p <- p - lr * grad` for each parameter, then decay the rate and
    /// clear the gradients.
    pub fn step(&mut self, params: &[(String, Tensor)]) -> Result<(), TensorError> {
        for (name, p) in params {
            let grad = p
                .take_grad()
                .ok_or_else(|| TensorError::MissingGradient(name.clone()))?;
            let mut v = p.node.values.borrow_mut();
            for (x, g) in v.iter_mut().zip(&grad) {
                *x -= self.learning_rate * g;
            }
        }
        self.learning_rate *= self.decay;
        self.step_count += 1;
        Ok(())
    }
}

impl Default for Optimizer {
    fn default() -> Self {
        // Initial rate and decay follow the training setup this models.
        Optimizer::new(0.0005, 0.9999)
    }
}
