//! Dense f64 tensors on a reverse-mode autodiff tape.
//!
//! A [`Tensor`] is an immutable row-major buffer plus shape; the only
//! mutation after creation is gradient accumulation. Ops live on [`Tape`]:
//! the tape records one backward rule per op in construction order (which is
//! topological by construction) and replays them in reverse on
//! [`Tape::backward`]. Forward ops reject NaN outputs; infinities are
//! permitted because `-inf` is the mask sentinel for attention scores.

mod gradcheck;
mod ops;
pub(crate) mod shape;

pub use gradcheck::finite_diff_check;

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

struct TensorInner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
}

/// Handle to an immutable n-dimensional f64 array. Cloning is cheap (`Rc`).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<TensorInner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, grad={})",
            self.inner.id, self.inner.shape, self.inner.requires_grad
        )
    }
}

impl Tensor {
    fn new_inner(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(shape::numel(&shape), data.len());
        Tensor {
            inner: Rc::new(TensorInner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
            }),
        }
    }

    /// Output of a recorded op; `requires_grad` decided by the tape.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        Tensor::new_inner(shape, data, requires_grad)
    }

    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if shape::numel(&shape) != data.len() {
            return Err(Error::invalid(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor::new_inner(shape, data, false))
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new_inner(vec![], vec![v], false)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Tensor::new_inner(shape.to_vec(), vec![v; shape::numel(shape)], false)
    }

    /// Marks this tensor as a gradient leaf. Returns a new handle; the data
    /// is shared if nothing else holds it.
    pub fn with_grad(self) -> Tensor {
        match Rc::try_unwrap(self.inner) {
            Ok(inner) => Tensor::new_inner(inner.shape, inner.data, true),
            Err(rc) => Tensor::new_inner(rc.shape.clone(), rc.data.clone(), true),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Value of a one-element tensor.
    ///
    /// Panics if the tensor holds more than one value.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.inner.data[0]
    }

    /// Copy of the accumulated gradient, if any backward pass reached this
    /// tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn grad_or_zeros(&self) -> Vec<f64> {
        self.grad().unwrap_or_else(|| vec![0.0; self.numel()])
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Adds `contrib` into the gradient buffer, allocating zeros on first use.
    pub(crate) fn accumulate_grad(&self, contrib: &[f64]) {
        debug_assert_eq!(contrib.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![0.0; self.numel()]);
        for (g, c) in buf.iter_mut().zip(contrib) {
            *g += *c;
        }
    }

    /// Runs `f` against the (zero-initialized) gradient buffer.
    pub(crate) fn with_grad_buf<R>(&self, f: impl FnOnce(&mut [f64]) -> R) -> R {
        let mut slot = self.inner.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![0.0; self.numel()]);
        f(buf)
    }

    fn seed_grad_ones(&self) {
        *self.inner.grad.borrow_mut() = Some(vec![1.0; self.numel()]);
    }
}

struct Record {
    #[allow(dead_code)]
    op: &'static str,
    backward: Box<dyn Fn()>,
}

/// Records ops for one forward pass and replays their backward rules.
///
/// One tape per forward/backward cycle; distinct tapes are independent, so
/// separate passes may run on separate threads. A tape built with
/// [`Tape::inference`] records nothing and its outputs never require
/// gradients.
pub struct Tape {
    records: RefCell<Vec<Record>>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            records: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A non-recording tape for forward-only evaluation.
    pub fn inference() -> Tape {
        Tape {
            records: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn num_ops(&self) -> usize {
        self.records.borrow().len()
    }

    pub(crate) fn wants_grad(&self, inputs: &[&Tensor]) -> bool {
        self.grad_enabled && inputs.iter().any(|t| t.requires_grad())
    }

    pub(crate) fn record(&self, op: &'static str, backward: impl Fn() + 'static) {
        self.records.borrow_mut().push(Record {
            op,
            backward: Box::new(backward),
        });
    }

    /// Backpropagates from a scalar loss through every recorded op, in
    /// reverse construction order. Each `requires_grad` leaf accumulates the
    /// sum of the path gradients that reach it. The tape is drained: a second
    /// call is a no-op apart from re-seeding the loss gradient.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::NonScalarLoss(loss.shape().to_vec()));
        }
        loss.seed_grad_ones();
        let records = std::mem::take(&mut *self.records.borrow_mut());
        for record in records.iter().rev() {
            (record.backward)();
        }
        Ok(())
    }
}

/// NaN anywhere in an op output is an error; infinities pass (mask sentinel).
pub(crate) fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite(op.to_string()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0]).is_err());
        let t = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.numel(), 4);
    }

    #[test]
    fn scalar_has_empty_shape() {
        let s = Tensor::scalar(3.5);
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.item(), 3.5);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let tape = Tape::new();
        let x = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap().with_grad();
        let y = tape.add(&x, &x).unwrap();
        match tape.backward(&y) {
            Err(Error::NonScalarLoss(shape)) => assert_eq!(shape, vec![2]),
            other => panic!("expected NonScalarLoss, got {other:?}"),
        }
    }

    #[test]
    fn leaf_used_twice_accumulates_both_paths() {
        // y = x + x  =>  dy/dx = 2
        let tape = Tape::new();
        let x = Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5])
            .unwrap()
            .with_grad();
        let y = tape.add(&x, &x).unwrap();
        let loss = tape.sum_all(&y).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn inference_tape_records_nothing() {
        let tape = Tape::inference();
        let x = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap().with_grad();
        let y = tape.mul(&x, &x).unwrap();
        assert!(!y.requires_grad());
        assert_eq!(tape.num_ops(), 0);
    }
}
