//! Dense f64 tensors with a recorded computation graph for reverse-mode
//! differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted node. Every operation
//! returns a new node that remembers its inputs; calling
//! [`Tensor::backward`] on a scalar walks the graph in reverse and
//! accumulates gradients into the leaves that were created with
//! `requires_grad`. Parameters are never mutated in place: optimizers build
//! fresh leaves and swap them into the [`ParamStore`](crate::ParamStore).

mod autograd;
mod ops;

use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use thiserror::Error;

pub use ops::Mode;
pub(crate) use ops::Op;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{0} produced a non-finite value")]
    NonFinite(&'static str),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this graph; call reset_backward first")]
    BackwardTwice,
    #[error("dropout rate must lie in [0, 1), got {0}")]
    InvalidDropoutRate(f64),
    #[error("{0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    op: Option<Op>,
    grad: Mutex<Option<Vec<f64>>>,
    consumed: AtomicBool,
}

/// Row-major dense tensor. Cloning is cheap and shares the node.
#[derive(Clone)]
pub struct Tensor {
    node: Arc<Node>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .field("values", &self.node.values)
            .finish()
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.iter().any(|&d| d == 0) || shape.iter().product::<usize>() != len {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            len,
        });
    }
    Ok(())
}

impl Tensor {
    fn leaf(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Result<Self> {
        check_shape(&shape, values.len())?;
        Ok(Self {
            node: Arc::new(Node {
                shape,
                values,
                requires_grad,
                op: None,
                grad: Mutex::new(None),
                consumed: AtomicBool::new(false),
            }),
        })
    }

    /// Constant (non-differentiable) tensor.
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        Self::leaf(shape.to_vec(), values, false)
    }

    /// Leaf that collects gradients during backward.
    pub fn parameter(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        Self::leaf(shape.to_vec(), values, true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("zero-sized dimension")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("zero-sized dimension")
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(&[], vec![value]).expect("scalar shape")
    }

    /// `n × n` identity.
    pub fn eye(n: usize) -> Self {
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            v[i * n + i] = 1.0;
        }
        Self::new(&[n, n], v).expect("zero-sized identity")
    }

    /// Builds a matrix from row slices; all rows must share one length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::InvalidArgument("ragged rows".into()));
        }
        let values = rows.iter().flatten().copied().collect();
        Self::new(&[rows.len(), cols], values)
    }

    pub(crate) fn from_op(shape: Vec<usize>, values: Vec<f64>, op: Op, name: &'static str) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(name));
        }
        let requires_grad = op.parents().iter().any(|p| p.requires_grad());
        Ok(Self {
            node: Arc::new(Node {
                shape,
                values,
                requires_grad,
                // A graph that cannot reach any trainable leaf need not be kept.
                op: requires_grad.then_some(op),
                grad: Mutex::new(None),
                consumed: AtomicBool::new(false),
            }),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.node.values
    }

    pub fn numel(&self) -> usize {
        self.node.values.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Accumulated gradient, if backward has reached this leaf.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.lock().expect("grad lock poisoned") = None;
    }

    /// Constant copy with the same values, cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Self::leaf(self.node.shape.clone(), self.node.values.clone(), false).expect("valid shape")
    }

    /// Allows `backward` to run again on this loss node.
    pub fn reset_backward(&self) {
        self.node.consumed.store(false, Ordering::SeqCst);
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.node.shape.clone()));
        }
        Ok(self.node.values[0])
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.node.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(TensorError::InvalidArgument(format!(
                "expected a matrix, got shape {s:?}"
            ))),
        }
    }

    pub fn row(&self, i: usize) -> Result<&[f64]> {
        let (r, c) = self.dims2()?;
        if i >= r {
            return Err(TensorError::InvalidArgument(format!("row {i} out of {r}")));
        }
        Ok(&self.node.values[i * c..(i + 1) * c])
    }

    pub(crate) fn ptr(&self) -> *const Node {
        Arc::as_ptr(&self.node)
    }

    pub(crate) fn op(&self) -> Option<&Op> {
        self.node.op.as_ref()
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.node.grad.lock().expect("grad lock poisoned");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    pub(crate) fn mark_consumed(&self) -> bool {
        self.node.consumed.swap(true, Ordering::SeqCst)
    }

    /// True when both tensors carry identical shape and bit patterns.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
            && self
                .values()
                .iter()
                .zip(other.values())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
