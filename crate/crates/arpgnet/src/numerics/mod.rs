//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: a [`Tape`] records every primitive
//! operation in execution order, each producing an immutable value node, and
//! [`Tensor`] handles are cheap indices into that record. Calling
//! [`Tensor::backward`] on a scalar walks the record in reverse and
//! accumulates adjoints into every node that requires gradients.
//!
//! Two scalar widths are supported through the [`Scalar`] trait: `f32` for
//! training and inference, `f64` for gradient verification via
//! [`finite_diff_check`], where central differences need the extra precision.
//!
//! Every forward op scans its output for NaN/Inf and fails fast instead of
//! letting poison propagate; shape errors name both offending shapes.

mod grad_check;
mod ops;

pub use grad_check::{finite_diff_check, GradCheckReport};
pub use ops::{concat, dropout, leaky_relu, masked_softmax, matmul, mean_pool, prelu};

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use num_traits::Float;
use rand_distr::Distribution;
use thiserror::Error;

/// Floating-point scalar the whole stack is generic over.
///
/// `f32` is the default for training and inference; `f64` exists for
/// gradient verification, which is unreliable at 32-bit precision.
pub trait Scalar:
    Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Default
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn from_usize(n: usize) -> Self;
    fn to_f64(self) -> f64;
    /// Draws one sample from the standard normal distribution.
    fn standard_normal<R: rand::Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn from_usize(n: usize) -> Self {
        n as f32
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
    fn standard_normal<R: rand::Rng + ?Sized>(rng: &mut R) -> Self {
        rand_distr::StandardNormal.sample(rng)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn from_usize(n: usize) -> Self {
        n as f64
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn standard_normal<R: rand::Rng + ?Sized>(rng: &mut R) -> Self {
        rand_distr::StandardNormal.sample(rng)
    }
}

/// Errors raised by tensor construction, forward ops, and backward passes.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: left operand {left:?}, right operand {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {op}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("data length {len} does not match shape {shape:?} (expected {expected})")]
    DataLength {
        len: usize,
        shape: Vec<usize>,
        expected: usize,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("softmax row {row} has no unmasked entries")]
    DegenerateRow { row: usize },
    #[error("dropout rate {rate} is outside [0, 1)")]
    InvalidDropoutRate { rate: f64 },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("loss is detached: no differentiable path to any parameter")]
    DetachedLoss,
    #[error("tensors belong to different tapes")]
    TapeMismatch,
    #[error("index {index} out of range for {what} of size {size}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },
    #[error("axis {axis} out of range for rank-{rank} tensor in {op}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
}

pub(crate) struct Node<T: Scalar> {
    pub(crate) op: ops::Op<T>,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<T>,
    pub(crate) grad: Vec<T>,
    pub(crate) needs_grad: bool,
}

pub(crate) struct TapeInner<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
}

/// Ordered record of executed primitive operations.
///
/// Nodes are stored in execution order, which is also a valid topological
/// order, so the backward pass is a single reverse sweep. A tape handle is a
/// reference-counted pointer; clones share the same record.
pub struct Tape<T: Scalar> {
    inner: Rc<RefCell<TapeInner<T>>>,
}

impl<T: Scalar> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Tape {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Watermark into a tape, used to discard per-step activations while keeping
/// the parameters recorded below it alive. Obtained from [`Tape::mark`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TapeMark(usize);

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new() })),
        }
    }

    /// Number of nodes currently recorded.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a non-differentiable value node.
    pub fn constant(&self, shape: &[usize], data: &[T]) -> Result<Tensor<T>, TensorError> {
        self.leaf(shape, data, false)
    }

    /// Records a trainable value node; gradients will be accumulated for it.
    pub fn param(&self, shape: &[usize], data: &[T]) -> Result<Tensor<T>, TensorError> {
        self.leaf(shape, data, true)
    }

    /// Records a rank-0 constant. Panics only if `value` is non-finite.
    pub fn scalar(&self, value: T) -> Tensor<T> {
        self.leaf(&[], &[value], false)
            .expect("finite rank-0 leaf is always valid")
    }

    fn leaf(
        &self,
        shape: &[usize],
        data: &[T],
        needs_grad: bool,
    ) -> Result<Tensor<T>, TensorError> {
        if shape.iter().any(|&e| e == 0) {
            return Err(TensorError::InvalidShape {
                op: "leaf",
                shape: shape.to_vec(),
                reason: "extents must be positive".to_string(),
            });
        }
        self.push(ops::Op::Leaf, shape.to_vec(), data.to_vec(), needs_grad)
    }

    /// Returns a watermark covering everything recorded so far.
    pub fn mark(&self) -> TapeMark {
        TapeMark(self.len())
    }

    /// Discards every node recorded after `mark`. Tensor handles created
    /// above the watermark become invalid and must not be used afterwards.
    pub fn reset_to(&self, mark: TapeMark) {
        let mut inner = self.inner.borrow_mut();
        assert!(
            mark.0 <= inner.nodes.len(),
            "watermark {} beyond tape length {}",
            mark.0,
            inner.nodes.len()
        );
        inner.nodes.truncate(mark.0);
    }

    /// Zeroes every gradient buffer on the tape.
    pub fn zero_grads(&self) {
        let mut inner = self.inner.borrow_mut();
        for node in inner.nodes.iter_mut() {
            for g in node.grad.iter_mut() {
                *g = T::zero();
            }
        }
    }

    pub(crate) fn same_tape(&self, other: &Tape<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub(crate) fn borrow_inner(&self) -> std::cell::Ref<'_, TapeInner<T>> {
        self.inner.borrow()
    }

    pub(crate) fn borrow_inner_mut(&self) -> std::cell::RefMut<'_, TapeInner<T>> {
        self.inner.borrow_mut()
    }

    /// Validates shape/data agreement, scans for non-finite values, and
    /// pushes a new node, returning its handle.
    pub(crate) fn push(
        &self,
        op: ops::Op<T>,
        shape: Vec<usize>,
        data: Vec<T>,
        needs_grad: bool,
    ) -> Result<Tensor<T>, TensorError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape,
                expected,
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let grad = vec![T::zero(); data.len()];
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            op,
            shape,
            data,
            grad,
            needs_grad,
        });
        let index = inner.nodes.len() - 1;
        drop(inner);
        Ok(Tensor {
            tape: self.clone(),
            index,
        })
    }
}

/// Handle to one value node on a [`Tape`]. Cloning is cheap and refers to the
/// same node.
pub struct Tensor<T: Scalar> {
    pub(crate) tape: Tape<T>,
    pub(crate) index: usize,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            tape: self.tape.clone(),
            index: self.index,
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("index", &self.index)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn shape(&self) -> Vec<usize> {
        self.tape.borrow_inner().nodes[self.index].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.borrow_inner().nodes[self.index].needs_grad
    }

    /// Copies the node's forward value out of the tape.
    pub fn value(&self) -> Vec<T> {
        self.tape.borrow_inner().nodes[self.index].data.clone()
    }

    /// Copies the node's accumulated gradient. All zeros before a backward
    /// pass has reached this node.
    pub fn grad(&self) -> Vec<T> {
        self.tape.borrow_inner().nodes[self.index].grad.clone()
    }

    /// Extracts the single element of a one-element tensor.
    pub fn item(&self) -> Result<T, TensorError> {
        let inner = self.tape.borrow_inner();
        let node = &inner.nodes[self.index];
        if node.data.len() != 1 {
            return Err(TensorError::InvalidShape {
                op: "item",
                shape: node.shape.clone(),
                reason: "expected exactly one element".to_string(),
            });
        }
        Ok(node.data[0])
    }

    /// Overwrites the node's value in place, keeping its shape. Used by the
    /// optimizer to apply parameter updates between steps.
    pub fn set_data(&self, data: &[T]) -> Result<(), TensorError> {
        let mut inner = self.tape.borrow_inner_mut();
        let node = &mut inner.nodes[self.index];
        if data.len() != node.data.len() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: node.shape.clone(),
                expected: node.data.len(),
            });
        }
        node.data.copy_from_slice(data);
        Ok(())
    }

    pub(crate) fn same_tape(&self, other: &Tensor<T>) -> bool {
        self.tape.same_tape(&other.tape)
    }

    /// Reverse-mode sweep from this scalar. Zeroes all gradient buffers
    /// first, seeds this node with 1, then accumulates adjoints into every
    /// node that requires gradients; fan-out contributions sum.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss { shape: self.shape() });
        }
        if !self.requires_grad() {
            return Err(TensorError::DetachedLoss);
        }
        self.tape.zero_grads();
        let mut inner = self.tape.borrow_inner_mut();
        for g in inner.nodes[self.index].grad.iter_mut() {
            *g = T::one();
        }
        for idx in (0..=self.index).rev() {
            if !inner.nodes[idx].needs_grad {
                continue;
            }
            if inner.nodes[idx].grad.iter().all(|g| *g == T::zero()) {
                continue;
            }
            ops::backprop_node(&mut inner.nodes, idx);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tape() -> Tape<f64> {
        Tape::new()
    }

    #[test]
    fn constant_rejects_length_mismatch() {
        let t = tape();
        let err = t.constant(&[2, 2], &[1.0, 2.0, 3.0]).unwrap_err();
        assert!(matches!(err, TensorError::DataLength { len: 3, .. }));
    }

    #[test]
    fn constant_rejects_zero_extent() {
        let t = tape();
        let err = t.constant(&[2, 0], &[]).unwrap_err();
        assert!(matches!(err, TensorError::InvalidShape { .. }));
    }

    #[test]
    fn constant_rejects_non_finite() {
        let t = tape();
        let err = t.constant(&[2], &[1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
    }

    #[test]
    fn scalar_has_rank_zero_and_one_element() {
        let t = tape();
        let s = t.scalar(2.5);
        assert_eq!(s.shape(), Vec::<usize>::new());
        assert_eq!(s.numel(), 1);
        assert_eq!(s.item().unwrap(), 2.5);
    }

    #[test]
    fn item_rejects_multi_element() {
        let t = tape();
        let x = t.constant(&[2], &[1.0, 2.0]).unwrap();
        assert!(x.item().is_err());
    }

    #[test]
    fn set_data_roundtrip_and_length_check() {
        let t = tape();
        let x = t.param(&[2], &[1.0, 2.0]).unwrap();
        x.set_data(&[3.0, 4.0]).unwrap();
        assert_eq!(x.value(), vec![3.0, 4.0]);
        assert!(x.set_data(&[1.0]).is_err());
    }

    #[test]
    fn reset_to_discards_nodes_above_watermark() {
        let t = tape();
        let _w = t.param(&[1], &[1.0]).unwrap();
        let mark = t.mark();
        let _a = t.constant(&[1], &[2.0]).unwrap();
        let _b = t.constant(&[1], &[3.0]).unwrap();
        assert_eq!(t.len(), 3);
        t.reset_to(mark);
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let t = tape();
        let x = t.param(&[2], &[1.0, 2.0]).unwrap();
        let err = x.backward().unwrap_err();
        assert!(matches!(err, TensorError::NonScalarLoss { .. }));
    }

    #[test]
    fn backward_rejects_detached_loss() {
        let t = tape();
        let x = t.constant(&[1], &[1.0]).unwrap();
        let err = x.backward().unwrap_err();
        assert!(matches!(err, TensorError::DetachedLoss));
    }
}
