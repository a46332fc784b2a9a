//! Minimal dense f64 tensor library with reverse-mode automatic
//! differentiation.
//!
//! Tensors are handles (`Rc<RefCell<..>>`) onto graph nodes. Every operation
//! eagerly computes its value; when any input is tracked it also records a
//! backward closure, so calling [`Tensor::backward`] on a scalar loss fills
//! `grad` on every reachable parameter. Gradients accumulate (`+=`) across
//! fan-out; optimizers clear them explicitly.
//!
//! Conventions:
//! - row-major layout, explicit shapes, 64-bit floats throughout
//! - no broadcasting beyond scalar-tensor (a scalar is shape `[1]`)
//! - `conv2d` is cross-correlation (no kernel flip)
//! - graphs are single-threaded; distinct graphs may live on distinct threads

mod ops;
mod conv;
mod optim;

pub use conv::conv2d_out_extent;
pub use optim::{zero_grads, AdamState};

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Gradient rule for one op: receives (output grad, output data) and
/// accumulates into the captured input handles.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[f64])>;

pub(crate) struct Node {
    pub(crate) data: Vec<f64>,
    pub(crate) shape: Vec<usize>,
    pub(crate) grad: Option<Vec<f64>>,
    pub(crate) requires_grad: bool,
    pub(crate) parents: Vec<Tensor>,
    pub(crate) backward: Option<BackwardFn>,
}

/// Handle onto a computation-graph node.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<RefCell<Node>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let n = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &n.shape)
            .field("requires_grad", &n.requires_grad)
            .finish()
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn new_node(data: Vec<f64>, shape: Vec<usize>) -> Tensor {
        debug_assert_eq!(data.len(), numel_of(&shape));
        Tensor {
            inner: Rc::new(RefCell::new(Node {
                data,
                shape,
                grad: None,
                requires_grad: false,
                parents: Vec::new(),
                backward: None,
            })),
        }
    }

    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Dim(format!("zero extent in shape {shape:?}")));
        }
        if data.len() != numel_of(shape) {
            return Err(Error::Dim(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self::new_node(data, shape.to_vec()))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::new_node(vec![0.0; numel_of(shape)], shape.to_vec())
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Self::new_node(vec![value; numel_of(shape)], shape.to_vec())
    }

    pub fn scalar(value: f64) -> Tensor {
        Self::new_node(vec![value], vec![1])
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std.max(0.0)).expect("valid std");
        let data = (0..numel_of(shape)).map(|_| dist.sample(rng)).collect();
        Self::new_node(data, shape.to_vec())
    }

    /// Mark this tensor as a trainable leaf; gradients accumulate here.
    pub fn param(self) -> Tensor {
        self.inner.borrow_mut().requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    /// True when this node participates in gradient computation.
    pub(crate) fn tracked(&self) -> bool {
        let n = self.inner.borrow();
        n.requires_grad || n.backward.is_some()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn ndim(&self) -> usize {
        self.inner.borrow().shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.borrow(), |n| n.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let n = self.inner.borrow();
        assert_eq!(n.data.len(), 1, "item() requires a scalar tensor");
        n.data[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    /// Overwrite the stored values (used by optimizers and finite-difference
    /// probes); shape is fixed at construction.
    pub fn set_data(&self, data: &[f64]) -> Result<()> {
        let mut n = self.inner.borrow_mut();
        if data.len() != n.data.len() {
            return Err(Error::Dim(format!(
                "set_data length {} != {}",
                data.len(),
                n.data.len()
            )));
        }
        n.data.copy_from_slice(data);
        Ok(())
    }

    pub fn zero_grad(&self) {
        let mut n = self.inner.borrow_mut();
        let len = n.data.len();
        match &mut n.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
            slot => *slot = Some(vec![0.0; len]),
        }
    }

    pub fn clear_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    pub fn all_finite(&self) -> bool {
        self.inner.borrow().data.iter().all(|v| v.is_finite())
    }

    /// Register an op result. Records the backward rule only when at least
    /// one input is tracked.
    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        let tracked = parents.iter().any(Tensor::tracked);
        let t = Self::new_node(data, shape);
        if tracked {
            let mut n = t.inner.borrow_mut();
            n.parents = parents;
            n.backward = Some(backward);
        }
        t
    }

    pub(crate) fn accum_grad(&self, g: &[f64]) {
        if !self.tracked() {
            return;
        }
        let mut n = self.inner.borrow_mut();
        debug_assert_eq!(g.len(), n.data.len());
        match &mut n.grad {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar loss. Accumulates into `grad` of
    /// every reachable tracked tensor.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        // Iterative post-order DFS; graphs get deep enough that recursion is
        // not an option.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<*const Node> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            let key = RefCell::as_ptr(&t.inner) as *const Node;
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(key) {
                continue;
            }
            stack.push((t.clone(), true));
            let n = t.inner.borrow();
            if n.backward.is_some() {
                for p in &n.parents {
                    if p.tracked() {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }

        self.accum_grad(&[1.0]);
        for t in order.iter().rev() {
            let n = t.inner.borrow();
            if let (Some(bw), Some(g)) = (&n.backward, &n.grad) {
                bw(g, &n.data);
            }
        }
        Ok(())
    }
}
