//! Reverse-mode automatic differentiation over flat `f32` tensors.
//!
//! A [`Tensor`] is a shaped, row-major buffer of single-precision values.
//! Operations in [`ops`] record themselves on a [`Tape`] whenever any input
//! participates in differentiation; [`backward`] then replays the tape in
//! reverse, accumulating gradients into every participating tensor.
//! Gradient correctness is checked against central finite differences via
//! [`check::finite_diff_check`].

mod tape;

pub mod check;
pub mod ops;
pub mod optim;

pub use tape::{backward, Tape};

use std::cell::Ref;
use std::cell::RefCell;
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} values, got {actual}")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape {0:?} has a zero extent")]
    ZeroExtent(Vec<usize>),
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("dropout probability {0} is outside [0, 1)")]
    InvalidDropout(f32),
    #[error("kernel size {k} exceeds padded input {h}x{w}")]
    KernelTooLarge { k: usize, h: usize, w: usize },
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("loss tensor was not produced on this tape")]
    LossNotOnTape,
    #[error("parameter {0} has no gradient")]
    MissingGradient(String),
    #[error("parameter {0} has a non-finite gradient")]
    NonFiniteGradient(String),
}

/// Forward-pass mode. Dropout and augmentation apply only in `Train`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// An n-dimensional single-precision array with optional gradient
/// participation. Cloning is shallow: clones share storage.
#[derive(Clone)]
pub struct Tensor {
    shape: Rc<[usize]>,
    data: Rc<RefCell<Vec<f32>>>,
    grad: Rc<RefCell<Option<Vec<f32>>>>,
    grad_enabled: bool,
}

impl Tensor {
    /// Builds a tensor from flat row-major values.
    ///
    /// Errors when the shape does not match the value count, any extent is
    /// zero, or any value is non-finite.
    pub fn new(shape: &[usize], values: Vec<f32>, grad_enabled: bool) -> Result<Self, TensorError> {
        if shape.iter().any(|&e| e == 0) {
            return Err(TensorError::ZeroExtent(shape.to_vec()));
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(TensorError::ShapeMismatch {
                shape: shape.to_vec(),
                expected,
                actual: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(i));
        }
        Ok(Self::from_parts(shape.to_vec(), values, grad_enabled))
    }

    /// Zero-filled tensor. Shape must already be valid.
    pub fn zeros(shape: &[usize], grad_enabled: bool) -> Self {
        let n: usize = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![0.0; n], grad_enabled)
    }

    /// A non-differentiable scalar.
    pub fn scalar(value: f32) -> Self {
        Self::from_parts(vec![1], vec![value], false)
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>, grad_enabled: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape: shape.into(),
            data: Rc::new(RefCell::new(data)),
            grad: Rc::new(RefCell::new(None)),
            grad_enabled,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Borrow the underlying values. Keep the borrow short-lived.
    pub fn data(&self) -> Ref<'_, Vec<f32>> {
        self.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.data.borrow().clone()
    }

    /// The value of a scalar tensor. Panics if not scalar.
    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data.borrow()[0]
    }

    /// Current gradient, if one has been accumulated.
    pub fn grad(&self) -> Option<Vec<f32>> {
        self.grad.borrow().clone()
    }

    /// Drops any accumulated gradient.
    pub fn zero_grad(&self) {
        *self.grad.borrow_mut() = None;
    }

    /// Replaces the stored values. Length must match; values must be finite.
    pub fn set_data(&self, values: &[f32]) -> Result<(), TensorError> {
        if values.len() != self.numel() {
            return Err(TensorError::ShapeMismatch {
                shape: self.shape.to_vec(),
                expected: self.numel(),
                actual: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(i));
        }
        self.data.borrow_mut().copy_from_slice(values);
        Ok(())
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub(crate) fn accumulate_grad(&self, delta: &[f32]) {
        debug_assert_eq!(delta.len(), self.numel());
        let mut slot = self.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    pub(crate) fn set_grad(&self, values: Vec<f32>) {
        debug_assert_eq!(values.len(), self.numel());
        *self.grad.borrow_mut() = Some(values);
    }

    /// Mutates the stored values in place (optimizer updates).
    pub(crate) fn update_data(&self, f: impl FnOnce(&mut [f32])) {
        f(&mut self.data.borrow_mut());
    }

    pub(crate) fn same_storage(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.data, &other.data)
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("grad_enabled", &self.grad_enabled)
            .finish()
    }
}
