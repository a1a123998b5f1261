//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable n-dimensional `f32` (or, for verification,
//! `f64`) array plus an optional backward rule linking it to the tensors it
//! was computed from. Executing an operation whose inputs require gradients
//! records the rule; [`Tensor::backward`] replays the records in reverse
//! execution order, accumulating gradients into every reachable leaf.
//! Graphs are dynamic: dropping the loss tensor frees the whole record.
//!
//! Operations between tensors whose inputs do not require gradients record
//! nothing and keep no references, so frozen-model inference pays only for
//! the arithmetic.

pub mod elem;
pub mod gradcheck;
mod ops;

pub use elem::Elem;
pub use ops::{attn_energies, concat_cols, lstm_scan, stack_rows, Reduce};

use crate::error::{Error, Result};
use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::Arc;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Plain value without graph bookkeeping; cheap to clone and safe to move
/// across threads (datasets, caches, checkpoints).
#[derive(Clone, Debug)]
pub struct Array<E: Elem = f32> {
    pub shape: Vec<usize>,
    pub data: Arc<Vec<E>>,
}

impl<E: Elem> Array<E> {
    pub fn new(data: Vec<E>, shape: Vec<usize>) -> Self {
        assert_eq!(data.len(), shape.iter().product::<usize>(), "array data/shape mismatch");
        Array { shape, data: Arc::new(data) }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Array { shape, data: Arc::new(vec![E::ZERO; n]) }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Wrap as a constant tensor (no gradient).
    pub fn constant(&self) -> Tensor<E> {
        Tensor::from_parts(self.shape.clone(), self.data.clone(), false, None)
    }

    /// Wrap as a leaf that accumulates gradient.
    pub fn leaf(&self) -> Tensor<E> {
        Tensor::from_parts(self.shape.clone(), self.data.clone(), true, None)
    }

    pub fn map_elem<F: Elem>(&self, f: impl Fn(E) -> F) -> Array<F> {
        Array { shape: self.shape.clone(), data: Arc::new(self.data.iter().map(|&v| f(v)).collect()) }
    }
}

pub(crate) trait BackwardRule<E: Elem> {
    fn inputs(&self) -> Vec<Tensor<E>>;
    /// Accumulate input gradients given the output tensor and its gradient.
    fn backward(&self, out: &Tensor<E>, grad: &[E]);
}

pub(crate) struct Inner<E: Elem> {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<E>>>,
    rule: Option<Box<dyn BackwardRule<E>>>,
}

/// Handle to a node in the differentiation graph. Clones share the node.
pub struct Tensor<E: Elem = f32> {
    inner: Rc<Inner<E>>,
}

impl<E: Elem> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

impl<E: Elem> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl<E: Elem> Tensor<E> {
    pub(crate) fn from_parts(
        shape: Vec<usize>,
        data: Arc<Vec<E>>,
        requires_grad: bool,
        rule: Option<Box<dyn BackwardRule<E>>>,
    ) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                rule,
            }),
        }
    }

    /// New output node: records the rule only when some input needs gradient.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<E>, rule: Box<dyn BackwardRule<E>>) -> Self {
        let needs = rule.inputs().iter().any(|t| t.inner.requires_grad);
        Tensor::from_parts(shape, Arc::new(data), needs, if needs { Some(rule) } else { None })
    }

    pub fn from_vec(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::InvalidShape(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor::from_parts(shape.to_vec(), Arc::new(data), false, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), Arc::new(vec![E::ZERO; n]), false, None)
    }

    pub fn scalar(v: E) -> Self {
        Tensor::from_parts(vec![], Arc::new(vec![v]), false, None)
    }

    /// Mark this leaf as a gradient target. Only meaningful on leaves.
    pub fn with_grad(self) -> Self {
        assert!(self.inner.rule.is_none(), "with_grad applies to leaves");
        Tensor::from_parts(self.inner.shape.clone(), self.inner.data.clone(), true, None)
    }

    /// Constant view of the same data, cut off from the graph.
    pub fn detach(&self) -> Self {
        Tensor::from_parts(self.inner.shape.clone(), self.inner.data.clone(), false, None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> &[E] {
        &self.inner.data
    }

    pub fn data_arc(&self) -> Arc<Vec<E>> {
        self.inner.data.clone()
    }

    pub fn array(&self) -> Array<E> {
        Array { shape: self.inner.shape.clone(), data: self.inner.data.clone() }
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> E {
        assert_eq!(self.numel(), 1, "item() requires a scalar tensor");
        self.inner.data[0]
    }

    /// Accumulated gradient, if any backward pass reached this node.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.borrow().clone()
    }

    /// Gradient with absent treated as exact zero.
    pub fn grad_or_zeros(&self) -> Vec<E> {
        self.inner.grad.borrow().clone().unwrap_or_else(|| vec![E::ZERO; self.numel()])
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[E]) {
        debug_assert_eq!(g.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    pub(crate) fn accumulate_grad_owned(&self, g: Vec<E>) {
        debug_assert_eq!(g.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g),
        }
    }

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
    /// leaf with `requires_grad` reachable from the loss; repeated calls
    /// without `zero_grad` keep accumulating.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.inner.shape
            )));
        }
        // Gather participating nodes; creation ids are monotone within a
        // thread, so descending id order is reverse execution order (a valid
        // reverse topological order of the recorded graph).
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        let mut nodes: Vec<Tensor<E>> = Vec::new();
        while let Some(t) = stack.pop() {
            if !t.inner.requires_grad || !seen.insert(t.inner.id) {
                continue;
            }
            if let Some(rule) = &t.inner.rule {
                for inp in rule.inputs() {
                    stack.push(inp);
                }
            }
            nodes.push(t);
        }
        nodes.sort_by(|a, b| b.inner.id.cmp(&a.inner.id));
        self.accumulate_grad(&[E::ONE]);
        for t in &nodes {
            if let Some(rule) = &t.inner.rule {
                // Reverse topological order means every consumer has already
                // deposited its contribution; take the gradient so repeated
                // backward passes do not re-consume stale intermediate grads.
                let g = t.inner.grad.borrow_mut().take();
                if let Some(g) = g {
                    rule.backward(t, &g);
                }
            }
        }
        Ok(())
    }

    /// True if every entry is finite.
    pub fn all_finite(&self) -> bool {
        self.inner.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_and_constant_flags() {
        let c = Tensor::<f32>::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        assert!(!c.requires_grad());
        let l = c.clone().with_grad();
        assert!(l.requires_grad());
        assert_eq!(l.data(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::<f32>::from_vec(vec![1.0, 2.0], &[2]).unwrap().with_grad();
        let y = x.relu();
        assert!(matches!(y.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_accumulates_without_reset() {
        let x = Tensor::<f32>::from_vec(vec![1.0, 2.0, 3.0], &[3]).unwrap().with_grad();
        let loss = x.sum_all();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0, 2.0]);
        x.zero_grad();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn non_participating_leaf_gets_zero_grad() {
        let x = Tensor::<f32>::from_vec(vec![1.0], &[1]).unwrap().with_grad();
        let y = Tensor::<f32>::from_vec(vec![5.0], &[1]).unwrap().with_grad();
        let loss = x.sum_all();
        loss.backward().unwrap();
        assert!(y.grad().is_none());
        assert_eq!(y.grad_or_zeros(), vec![0.0]);
    }

    #[test]
    fn annihilated_branch_has_zero_grad() {
        // loss = 0 * f(x): gradient through f is exactly zero.
        let x = Tensor::<f32>::from_vec(vec![1.0, -2.0], &[2]).unwrap().with_grad();
        let f = x.tanh().sum_all();
        let loss = f.scale(0.0);
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0]);
    }
}
