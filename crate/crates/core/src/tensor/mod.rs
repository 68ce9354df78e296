//! Dense row-major tensors and the reverse-mode differentiation engine.
//!
//! Values live in plain [`Tensor`]s. Differentiable computation is recorded
//! on a [`Graph`] (the tape); trainable tensors are kept in [`ParamStore`]s
//! and bound into a graph on demand, so one parameter used at every time
//! step of a recurrence appears on the tape exactly once.

mod graph;
mod gradcheck;
mod optim;
mod params;

pub use graph::{Gradients, Graph, Padding, Var};
pub(crate) use graph::softmax_in_place;
pub use gradcheck::{grad_check, grad_check_model, grad_check_model_steps, grad_check_steps, Parameterized};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} values but {got} were supplied")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("zero extent in shape {0:?}")]
    ZeroExtent(Vec<usize>),
    #[error("kernel width must be odd for same padding, got {0}")]
    EvenKernel(usize),
    #[error("dilation must be at least 1")]
    ZeroDilation,
    #[error("pooling window {window} exceeds input length {len}")]
    WindowTooLarge { window: usize, len: usize },
    #[error("stride must be at least 1")]
    ZeroStride,
    #[error("input of length {len} too short for kernel span {span}")]
    InputTooShort { len: usize, span: usize },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value produced by `{op}` at node {node}")]
    NonFinite { op: &'static str, node: usize },
    #[error("finite-difference step {0} outside [1e-6, 1e-3]")]
    BadStep(f64),
    #[error("function value is not finite")]
    NonFiniteObjective,
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// A dense array with an optional gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(TensorError::ZeroExtent(shape.to_vec()));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("zero extent in shape")
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(&[1, 1], vec![v]).unwrap()
    }

    /// A `1 × n` row vector.
    pub fn row(values: &[f64]) -> Self {
        Self::new(&[1, values.len()], values.to_vec()).expect("empty row")
    }

    /// An `n × 1` column, the layout used for mono signals.
    pub fn column(values: &[f64]) -> Self {
        Self::new(&[values.len(), 1], values.to_vec()).expect("empty column")
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(&[rows.len(), cols], data)
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Trailing extent product; the row width for matrices.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn with_grad(mut self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        if on && self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        } else if !on {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Adds `g` into the gradient buffer; no-op for tensors without one.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        if let Some(buf) = self.grad.as_mut() {
            assert_eq!(buf.len(), g.len(), "gradient length mismatch");
            buf.iter_mut().zip(g).for_each(|(b, v)| *b += v);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected,
                got: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }
}
