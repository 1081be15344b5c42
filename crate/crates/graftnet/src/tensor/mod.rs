//! N-dimensional tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable row-major buffer plus shape. Ops that consume
//! tensors with `requires_grad` set record their inputs and a backward rule on
//! the output node; [`Tensor::backward`] walks that graph in reverse
//! topological order and accumulates `∂loss/∂x` into every reachable
//! gradient-tracked leaf. The graph is the tape: it lives as long as the
//! output tensors referencing it and is freed when they drop, so each
//! training step builds a fresh tape while parameters persist outside it.
//!
//! Tensors and the graph they form are a single-threaded unit of work
//! (`Rc`-based, not `Send`). Ops never mutate their inputs; only leaf data
//! may be rewritten in place, which is how the optimizer updates parameters
//! between steps.

mod norm;
mod ops;
mod spatial;
#[cfg(test)]
mod tests;

pub use ops::{bce_with_logits, concat};

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Scalar element type for tensors: `f32` for training, `f64` for
/// gradient-check precision.
pub trait Element:
    Copy
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn erf(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn max_with(self, other: Self) -> Self;
    fn min_with(self, other: Self) -> Self;
}

impl Element for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn erf(self) -> Self {
        libm::erff(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn max_with(self, other: Self) -> Self {
        f32::max(self, other)
    }
    fn min_with(self, other: Self) -> Self {
        f32::min(self, other)
    }
}

impl Element for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn max_with(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn min_with(self, other: Self) -> Self {
        f64::min(self, other)
    }
}

thread_local! {
    static NO_GRAD_DEPTH: Cell<usize> = const { Cell::new(0) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

/// Runs `f` with gradient recording disabled; ops executed inside produce
/// plain tensors with no graph attached. Nestable.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    NO_GRAD_DEPTH.with(|d| d.set(d.get() + 1));
    let out = f();
    NO_GRAD_DEPTH.with(|d| d.set(d.get() - 1));
    out
}

fn grad_enabled() -> bool {
    NO_GRAD_DEPTH.with(|d| d.get() == 0)
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Backward rule: receives the node's output gradient and its parent tensors,
/// and accumulates contributions into each parent that requires grad.
type BackwardFn<T> = Box<dyn Fn(&[T], &[Tensor<T>])>;

struct Inner<T: Element> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    parents: Vec<Tensor<T>>,
    backward: Option<BackwardFn<T>>,
}

/// An N-dimensional row-major array, cheaply cloneable (shared buffer).
pub struct Tensor<T: Element = f32> {
    inner: Rc<Inner<T>>,
}

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn check_len<T>(shape: &[usize], data: &[T]) -> Result<()> {
    let numel: usize = shape.iter().product();
    if numel != data.len() {
        return Err(Error::shape(format!(
            "shape {:?} implies {} elements, buffer has {}",
            shape,
            numel,
            data.len()
        )));
    }
    Ok(())
}

impl<T: Element> Tensor<T> {
    /// Constant tensor (no gradient tracking).
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_len(shape, &data)?;
        Ok(Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape: shape.to_vec(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: false,
                parents: Vec::new(),
                backward: None,
            }),
        })
    }

    /// Gradient-tracked leaf (a parameter or a checked input).
    pub fn leaf(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_len(shape, &data)?;
        Ok(Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape: shape.to_vec(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: true,
                parents: Vec::new(),
                backward: None,
            }),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![T::ZERO; numel]).expect("consistent by construction")
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![v; numel]).expect("consistent by construction")
    }

    pub fn scalar(v: T) -> Self {
        Tensor::new(&[1], vec![v]).expect("consistent by construction")
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        let record = grad_enabled() && parents.iter().any(|p| p.inner.requires_grad);
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: record,
                parents: if record { parents } else { Vec::new() },
                backward: if record { Some(backward) } else { None },
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Copies out the value buffer.
    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    /// Runs `f` over the value buffer without copying.
    pub fn with_data<R>(&self, f: impl FnOnce(&[T]) -> R) -> R {
        f(&self.inner.data.borrow())
    }

    /// Value of a scalar (single-element) tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.inner.data.borrow()[0]
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Overwrites the value buffer in place. Only valid on leaves between
    /// tape constructions (the optimizer's update path).
    pub fn set_data(&self, data: &[T]) {
        let mut cur = self.inner.data.borrow_mut();
        assert_eq!(cur.len(), data.len(), "set_data length mismatch");
        cur.copy_from_slice(data);
    }

    /// Mutates the value buffer in place via `f`.
    pub fn update_data(&self, f: impl FnOnce(&mut [T])) {
        f(&mut self.inner.data.borrow_mut());
    }

    pub(crate) fn accum_grad(&self, delta: &[T]) {
        if !self.inner.requires_grad {
            return;
        }
        let mut g = self.inner.grad.borrow_mut();
        match g.as_mut() {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(delta) {
                    *a += *b;
                }
            }
            None => *g = Some(delta.to_vec()),
        }
    }

    /// Like `accum_grad` but takes ownership, avoiding a copy on first write.
    pub(crate) fn accum_grad_owned(&self, delta: Vec<T>) {
        if !self.inner.requires_grad {
            return;
        }
        let mut g = self.inner.grad.borrow_mut();
        match g.as_mut() {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(&delta) {
                    *a += *b;
                }
            }
            None => *g = Some(delta),
        }
    }

    /// Reverse-mode sweep from a scalar loss: populates `grad` on every
    /// gradient-tracked leaf this loss depends on. Each op's backward rule
    /// runs exactly once, with its complete output gradient. Repeated calls
    /// accumulate into leaf grads (gradients add across passes until
    /// cleared), so a sum of losses equals the sum of separate sweeps.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::shape(format!(
                "backward() requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.inner.requires_grad {
            return Ok(()); // nothing reachable tracks gradients
        }

        // Iterative post-order DFS for a topological order over the graph.
        let mut topo: Vec<Tensor<T>> = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.inner.id);
        while let Some((node, child_idx)) = stack.pop() {
            if child_idx < node.inner.parents.len() {
                let parent = node.inner.parents[child_idx].clone();
                stack.push((node, child_idx + 1));
                if parent.inner.requires_grad && visited.insert(parent.inner.id) {
                    stack.push((parent, 0));
                }
            } else {
                topo.push(node);
            }
        }

        // Gradients for interior nodes live in this per-sweep map; only leaf
        // tensors keep a persistent grad. That keeps repeated sweeps
        // independent: no stale interior gradient can leak into a later pass.
        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(self.inner.id, vec![T::ONE]);
        for node in topo.iter().rev() {
            let Some(grad_out) = pending.remove(&node.inner.id) else {
                continue;
            };
            match &node.inner.backward {
                Some(back) => {
                    back(&grad_out, &node.inner.parents);
                    // Backward rules accumulate into parent.grad; move interior
                    // parents' contributions into the sweep-local map.
                    for p in &node.inner.parents {
                        if p.inner.backward.is_some() {
                            if let Some(g) = p.inner.grad.borrow_mut().take() {
                                pending
                                    .entry(p.inner.id)
                                    .and_modify(|acc| {
                                        for (a, b) in acc.iter_mut().zip(&g) {
                                            *a += *b;
                                        }
                                    })
                                    .or_insert(g);
                            }
                        }
                    }
                }
                None => node.accum_grad_owned(grad_out),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod core_tests {
    use super::*;

    #[test]
    fn shape_buffer_mismatch_rejected() {
        assert!(Tensor::<f64>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::<f64>::leaf(&[2], vec![1.0, 2.0]).unwrap();
        assert!(x.backward().is_err());
    }

    #[test]
    fn scalar_leaf_backward_seeds_one() {
        let x = Tensor::<f64>::leaf(&[1], vec![3.0]).unwrap();
        x.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0]);
    }

    #[test]
    fn no_grad_suppresses_recording() {
        let x = Tensor::<f64>::leaf(&[2], vec![1.0, 2.0]).unwrap();
        let y = no_grad(|| x.sum());
        assert!(!y.requires_grad());
    }
}
