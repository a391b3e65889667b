//! Dense row-major tensors and a reverse-mode autodiff tape.
//!
//! A [`Tensor`] owns its values and an optional gradient slot. Computation
//! that needs derivatives is recorded on a [`Tape`]: leaves are registered
//! with [`Tape::param`] or [`Tape::constant`], every op returns a [`Var`]
//! handle, and [`Tape::backward`] consumes the tape and returns the
//! [`Gradients`] of a scalar loss with respect to every recorded node.

mod gradcheck;
pub(crate) mod io;
mod tape;

pub use gradcheck::{grad_check, grad_check_many, GradCheckConfig, GradCheckReport};
pub use io::{
    read_tensor, read_tensor_from, write_tensor, write_tensor_to, DType, FormatError, TENSOR_MAGIC, TENSOR_VERSION,
};
pub use tape::{Gradients, ReduceKind, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("value count {got} does not match shape {shape:?} (expected {expected})")]
    CountMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("numeric error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("variable {0} does not belong to this tape")]
    UnknownVar(usize),
    #[error("function is not deterministic: two evaluations differ ({first} vs {second})")]
    NonDeterministic { first: f64, second: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        detail: detail.into(),
    }
}

/// N-dimensional real array. Rank 0 (`shape == []`) is a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        validate_shape(shape)?;
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(TensorError::CountMismatch {
                shape: shape.to_vec(),
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self, TensorError> {
        let n = shape.iter().product::<usize>();
        Self::new(shape, vec![value; n])
    }

    pub fn zeros(shape: &[usize]) -> Result<Self, TensorError> {
        Self::full(shape, 0.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Builds a vector of shape `[values.len()]`.
    pub fn from_vec(values: Vec<f64>) -> Result<Self, TensorError> {
        let n = values.len();
        Self::new(&[n], values)
    }

    /// Sets the gradient flag. A zeroed gradient slot is allocated when enabled.
    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self.grad = requires_grad.then(|| vec![0.0; self.data.len()]);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Adds `delta` into the gradient slot. No-op when gradients are disabled.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<(), TensorError> {
        if delta.len() != self.data.len() {
            return Err(shape_err(
                "accumulate_grad",
                format!("gradient has {} values, tensor has {}", delta.len(), self.data.len()),
            ));
        }
        if let Some(g) = self.grad.as_mut() {
            for (a, d) in g.iter_mut().zip(delta) {
                *a += d;
            }
        }
        Ok(())
    }

    /// Value at a multi-index.
    pub fn at(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of bounds for axis {i} with extent {ext}");
            flat = flat * ext + ix;
        }
        self.data[flat]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        validate_shape(shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(shape_err(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Copies the sub-tensor at `index` along axis 0, dropping that axis.
    pub fn index_outer(&self, index: usize) -> Result<Tensor, TensorError> {
        if self.shape.is_empty() || index >= self.shape[0] {
            return Err(shape_err(
                "index_outer",
                format!("index {index} out of range for shape {:?}", self.shape),
            ));
        }
        let inner: usize = self.shape[1..].iter().product();
        let data = self.data[index * inner..(index + 1) * inner].to_vec();
        Tensor::new(&self.shape[1..], data)
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor, TensorError> {
        let first = items.first().ok_or_else(|| shape_err("stack", "no tensors to stack"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(shape_err("stack", format!("{:?} vs {:?}", t.shape, first.shape)));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(&shape, data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn validate_shape(shape: &[usize]) -> Result<(), TensorError> {
    if shape.contains(&0) {
        return Err(shape_err("create", format!("zero extent in shape {shape:?}")));
    }
    Ok(())
}
