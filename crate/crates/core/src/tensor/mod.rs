//! Dense `f64` tensors with a tape-based reverse-mode autodiff engine.
//!
//! Parameters live in owned [`Tensor`]s. A training step registers them on a
//! fresh [`Tape`], builds the forward graph through the tape's ops, calls
//! [`Tape::backward`] once, and copies leaf gradients back into the tensors.
//! Intermediate gradients are dropped after backward unless the node was
//! marked with [`Tape::retain_grad`].

mod gradcheck;
mod kernels;
mod tape;

use serde::{Deserialize, Serialize};

pub use gradcheck::{finite_diff_check, hidden_grad_norms};
pub use kernels::{log_sigmoid, sigmoid};
pub use tape::{CustomBackward, Tape, Var};

/// Additive-bias sentinel for a blocked attention entry.
///
/// Softmax code tests for it explicitly and never does arithmetic with it.
pub const BLOCKED: f64 = f64::NEG_INFINITY;

#[inline]
pub fn is_blocked(x: f64) -> bool {
    x == BLOCKED
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("attention row {row} is fully blocked")]
    DegenerateRow { row: usize },
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("gradient of node {0} was not retained")]
    NotRetained(usize),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("var {0} does not belong to this tape")]
    UnknownVar(usize),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Dense row-major tensor with an optional gradient slot.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(default)]
    requires_grad: bool,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
    #[serde(skip)]
    node_id: Option<usize>,
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) || numel(&shape) != data.len() {
            return Err(TensorError::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
            node_id: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self::new(shape, vec![0.0; n]).expect("zero-sized tensor")
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = numel(&shape);
        Self::new(shape, vec![value; n]).expect("zero-sized tensor")
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(vec![], vec![value]).expect("scalar")
    }

    /// Marks the tensor as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(TensorError::Shape {
                op: "set_grad",
                left: self.shape.clone(),
                right: vec![grad.len()],
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn node_id(&self) -> Option<usize> {
        self.node_id
    }

    pub(crate) fn attach(&mut self, id: usize) {
        self.node_id = Some(id);
    }

    /// Detaches from the tape it was registered on.
    pub fn detach(&mut self) {
        self.node_id = None;
    }

    /// Rows and columns of a matrix; a vector is treated as a single row.
    pub fn dims2(&self) -> (usize, usize) {
        dims2(&self.shape)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, c) = self.dims2();
        &self.data[i * c..(i + 1) * c]
    }
}

pub(crate) fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => {
            let c = *shape.last().unwrap();
            (numel(shape) / c, c)
        }
    }
}
