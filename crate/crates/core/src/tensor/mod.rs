//! Dense row-major `f64` tensors with a dynamic reverse-mode tape.
//!
//! Every operation on tensors that require gradients records its parents and
//! a backward closure on the output node, so the computation graph is built
//! by simply running the forward pass. [`Tensor::backward`] walks that graph
//! in reverse topological order and accumulates `∂loss/∂leaf` into the grad
//! buffers of the leaves.
//!
//! Tensors are immutable after construction; only the grad buffer of a leaf
//! changes. Optimizers update parameters by swapping in a fresh leaf.

mod adamw;
mod gradcheck;
mod kernels;
mod ops;

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub use adamw::{AdamW, AdamWConfig};
pub use gradcheck::{grad_check, grad_check_with, Stencil};

type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

// Long tapes (thousands of chained ops) would overflow the stack with the
// default recursive drop. Backward closures only capture their parents, so
// once the parents are held here, dropping the closure cannot cascade.
impl Drop for Node {
    fn drop(&mut self) {
        let mut stack = std::mem::take(&mut self.parents);
        drop(self.backward.take());
        while let Some(t) = stack.pop() {
            if let Ok(mut node) = Rc::try_unwrap(t.0) {
                stack.append(&mut node.parents);
                drop(node.backward.take());
            }
        }
    }
}

/// A dense n-dimensional float array, optionally carrying a gradient.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Disables graph recording on this thread until dropped.
pub struct NoGradGuard {
    prev: bool,
}

impl NoGradGuard {
    pub fn new() -> Self {
        let prev = GRAD_ENABLED.with(|g| g.replace(false));
        Self { prev }
    }
}

impl Default for NoGradGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

/// Runs `f` without recording any operations on the tape.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let _guard = NoGradGuard::new();
    f()
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::dim(format!("shape {shape:?} has a zero extent")));
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::dim(format!("shape {shape:?} overflows")))?;
    if numel != len {
        return Err(Error::dim(format!(
            "shape {shape:?} holds {numel} elements but data has {len}"
        )));
    }
    Ok(())
}

impl Tensor {
    /// Creates a constant tensor that never receives gradients.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::leaf(data, shape.to_vec(), false))
    }

    /// Creates a trainable leaf.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::leaf(data, shape.to_vec(), true))
    }

    pub fn scalar(value: f64) -> Self {
        Self::leaf(vec![value], vec![1], false)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(vec![0.0; n], shape)
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(vec![value; n], shape)
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Result<Self> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self::new(data, shape)
    }

    fn leaf(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Self {
        Tensor(Rc::new(Node {
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// Builds an op output; records the backward closure only when grad mode
    /// is on and some parent needs gradients.
    pub(crate) fn from_op(
        op: &str,
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: &[&Tensor],
        backward: impl Fn(&[f64]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Result<Self> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(op.to_string()));
        }
        let record = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if !record {
            return Ok(Self::leaf(data, shape, false));
        }
        Ok(Tensor(Rc::new(Node {
            shape,
            data,
            requires_grad: true,
            grad: RefCell::new(None),
            parents: parents.iter().map(|p| (*p).clone()).collect(),
            backward: Some(Box::new(backward)),
        })))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Whether both handles point at the same node.
    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// True for tensors not produced by a recorded op.
    pub fn is_leaf(&self) -> bool {
        self.0.backward.is_none()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::dim(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.0.data[0])
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// A constant copy cut off from the tape.
    pub fn detach(&self) -> Tensor {
        Self::leaf(self.0.data.clone(), self.0.shape.clone(), false)
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(format!("expected a 2-D tensor, got shape {s:?}"))),
        }
    }

    /// Last-axis length and number of rows over the leading axes.
    pub(crate) fn rows_cols(&self) -> (usize, usize) {
        let cols = *self.shape().last().unwrap_or(&1);
        (self.numel() / cols, cols)
    }

    /// Back-propagates from this scalar into every leaf that requires grad.
    ///
    /// Leaf gradients accumulate across calls until [`Tensor::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::contract(
                "backward() on a tensor that was not produced by recorded ops",
            ));
        }
        let order = self.topo_order();
        let mut pending: HashMap<*const Node, Vec<f64>> = HashMap::new();
        pending.insert(Rc::as_ptr(&self.0), vec![1.0]);

        for node in order.iter().rev() {
            let key = Rc::as_ptr(&node.0);
            let Some(g) = pending.remove(&key) else {
                continue;
            };
            let Some(backward) = node.0.backward.as_ref() else {
                node.accumulate_leaf_grad(&g)?;
                continue;
            };
            let parent_grads = backward(&g);
            for (parent, pg) in node.0.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !parent.requires_grad() {
                    continue;
                }
                if parent.is_leaf() {
                    parent.accumulate_leaf_grad(&pg)?;
                } else {
                    match pending.entry(Rc::as_ptr(&parent.0)) {
                        std::collections::hash_map::Entry::Occupied(mut e) => {
                            for (a, b) in e.get_mut().iter_mut().zip(&pg) {
                                *a += b;
                            }
                        }
                        std::collections::hash_map::Entry::Vacant(e) => {
                            e.insert(pg);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn accumulate_leaf_grad(&self, g: &[f64]) -> Result<()> {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("backward".into()));
        }
        let mut slot = self.0.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![0.0; self.numel()]);
        for (a, b) in buf.iter_mut().zip(g) {
            *a += b;
        }
        Ok(())
    }

    /// Post-order over recorded nodes. Parents are visited last-to-first so
    /// that, for `l1 + l2` with disjoint interiors, every contribution from
    /// `l1` reaches a shared leaf before any from `l2`: the accumulation
    /// order then matches two separate backward passes exactly.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen: HashSet<*const Node> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !seen.insert(Rc::as_ptr(&node.0)) {
                continue;
            }
            stack.push((node.clone(), true));
            for p in node.0.parents.iter() {
                if p.requires_grad() && !seen.contains(&Rc::as_ptr(&p.0)) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &DataPreview(&self.0.data))
            .finish()
    }
}

struct DataPreview<'a>(&'a [f64]);

impl fmt::Debug for DataPreview<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.len() <= 8 {
            f.debug_list().entries(self.0).finish()
        } else {
            f.debug_list()
                .entries(&self.0[..8])
                .entry(&format_args!("... {} more", self.0.len() - 8))
                .finish()
        }
    }
}
