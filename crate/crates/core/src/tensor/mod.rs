//! Dense row-major tensors with a dynamic reverse-mode tape.
//!
//! Every op records its inputs and a local vector-Jacobian rule on the output
//! node. Graphs are rebuilt on each forward pass; `backward` walks the nodes
//! reachable from a scalar loss in reverse construction order and accumulates
//! gradients into leaf tensors that require them.

mod conv;
mod norm;
mod ops;
mod pool;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use conv::conv_output_size;
pub use norm::{BatchNormMode, RunningStats};
pub use pool::adaptive_window;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Inputs handed to a node's backward rule.
pub(crate) struct BackwardArgs<'a, T: Scalar> {
    /// Gradient of the loss w.r.t. this node's output.
    pub grad: &'a [T],
    /// This node's forward output.
    pub output: &'a [T],
    pub parents: &'a [Tensor<T>],
    /// `needs[i]` is true when parent `i` participates in differentiation.
    pub needs: &'a [bool],
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> Vec<Option<Vec<T>>>>;

struct Node<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: Cell<bool>,
    parents: Vec<Tensor<T>>,
    backward: Option<BackwardFn<T>>,
}

/// Handle to a node of the differentiation graph. Cloning is cheap and shares
/// the node.
pub struct Tensor<T: Scalar> {
    node: Rc<Node<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.node.data.borrow();
        let preview: Vec<_> = data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.requires_grad())
            .field("data", &preview)
            .finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    fn leaf(data: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> Self {
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(requires_grad),
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    /// Constant tensor (no gradient).
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
        }
        if numel_of(shape) != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {} values, got {}", numel_of(shape), data.len()),
            ));
        }
        Ok(Self::leaf(data, shape.to_vec(), false))
    }

    /// Trainable leaf tensor.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let t = Self::new(data, shape)?;
        t.node.requires_grad.set(true);
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::leaf(vec![value; numel_of(shape)], shape.to_vec(), false)
    }

    /// Rank-0 constant.
    pub fn scalar(value: T) -> Self {
        Self::leaf(vec![value], Vec::new(), false)
    }

    pub(crate) fn from_op(data: Vec<T>, shape: Vec<usize>, parents: Vec<Tensor<T>>, backward: BackwardFn<T>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let (parents, backward) = if requires_grad {
            (parents, Some(backward))
        } else {
            (Vec::new(), None)
        };
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(requires_grad),
                parents,
                backward,
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn ndim(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.node.shape)
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.node.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        let data = self.node.data.borrow();
        assert_eq!(data.len(), 1, "item() on tensor with {} elements", data.len());
        data[0]
    }

    /// Mutable access to a leaf's values, used by optimizers and loaders.
    ///
    /// Panics on non-leaf tensors: their values are owned by the graph.
    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        assert!(self.is_leaf(), "data_mut on a non-leaf tensor");
        self.node.data.borrow_mut()
    }

    pub fn is_leaf(&self) -> bool {
        self.node.backward.is_none()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad.get()
    }

    /// Toggles gradient tracking on a leaf (freezing / unfreezing a parameter).
    pub fn set_requires_grad(&self, on: bool) {
        assert!(self.is_leaf(), "set_requires_grad on a non-leaf tensor");
        self.node.requires_grad.set(on);
    }

    /// Accumulated gradient, if any backward pass reached this leaf.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Copy of the values as a new constant leaf.
    pub fn detach(&self) -> Self {
        Self::leaf(self.to_vec(), self.node.shape.clone(), false)
    }

    /// Identity of the underlying node.
    pub fn same_node(&self, other: &Tensor<T>) -> bool {
        Rc::ptr_eq(&self.node, &other.node)
    }

    /// Back-propagates from a single-element loss, accumulating into leaves.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape()),
            ));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        seen.insert(self.node.id);
        while let Some(t) = stack.pop() {
            for p in &t.node.parents {
                if p.requires_grad() && seen.insert(p.node.id) {
                    stack.push(p.clone());
                }
            }
            order.push(t);
        }
        order.sort_by_key(|t| std::cmp::Reverse(t.node.id));

        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(self.node.id, vec![T::one()]);
        for t in &order {
            let Some(g) = grads.remove(&t.node.id) else {
                continue;
            };
            match &t.node.backward {
                None => {
                    let mut slot = t.node.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(rule) => {
                    let needs: Vec<bool> = t.node.parents.iter().map(|p| p.requires_grad()).collect();
                    let output = t.node.data.borrow();
                    let parent_grads = rule(&BackwardArgs {
                        grad: &g,
                        output: &output,
                        parents: &t.node.parents,
                        needs: &needs,
                    });
                    debug_assert_eq!(parent_grads.len(), t.node.parents.len());
                    for ((p, pg), need) in t.node.parents.iter().zip(parent_grads).zip(&needs) {
                        let (Some(pg), true) = (pg, *need) else {
                            continue;
                        };
                        debug_assert_eq!(pg.len(), p.numel());
                        match grads.get_mut(&p.node.id) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &b)| *a += b),
                            None => {
                                grads.insert(p.node.id, pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructor_rejects_length_mismatch() {
        assert!(Tensor::<f64>::new(vec![1.0, 2.0], &[3]).is_err());
        assert!(Tensor::<f64>::new(vec![], &[0]).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let x = Tensor::param(vec![1.0f64, -2.0, 3.5], &[3]).unwrap();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares_is_twice_x() {
        let x = Tensor::param(vec![1.0f64, -2.0, 3.5], &[3]).unwrap();
        x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 7.0]);
    }

    #[test]
    fn gradients_accumulate_additively() {
        let x = Tensor::param(vec![0.3f64, 0.7], &[2]).unwrap();
        let loss = || x.mul(&x).unwrap().exp().sum();
        loss().backward().unwrap();
        let once = x.grad().unwrap();
        loss().backward().unwrap();
        let twice = x.grad().unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let x = Tensor::param(vec![1.0f64, 2.0], &[2]).unwrap();
        assert!(x.relu().backward().is_err());
    }

    #[test]
    fn shared_subexpression_visited_once() {
        // y = x*x; loss = sum(y + y) => d/dx = 4x
        let x = Tensor::param(vec![1.5f64, -1.0], &[2]).unwrap();
        let y = x.mul(&x).unwrap();
        y.add(&y).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0, -4.0]);
    }

    #[test]
    fn frozen_leaf_receives_no_grad() {
        let x = Tensor::param(vec![1.0f64, 2.0], &[2]).unwrap();
        let w = Tensor::param(vec![3.0f64, 4.0], &[2]).unwrap();
        w.set_requires_grad(false);
        x.mul(&w).unwrap().sum().backward().unwrap();
        assert!(w.grad().is_none());
        assert_eq!(x.grad().unwrap(), vec![3.0, 4.0]);
    }
}
