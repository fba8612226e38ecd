//! Dense f64 tensors with a reverse-mode differentiation tape.
//!
//! Storage is a flat row-major `Vec<f64>` behind an `Arc`; tensors are
//! immutable values after creation and cheap to clone. Differentiable
//! computations go through a [`Tape`], which records every operation and
//! replays them in reverse to accumulate gradients.

mod check;
mod tape;

pub use check::finite_diff_check;
pub use tape::{Gradients, NodeId, Tape};

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Errors from tensor construction and tape operations.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TensorError {
    #[error("shape/data mismatch: shape {shape:?} implies {expected} elements, got {got}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank-{expected} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    Axis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: index {index} out of range (limit {limit})")]
    Index {
        op: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("{op}: tensor is not registered on this tape")]
    NotOnTape { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type TensorResult<T> = std::result::Result<T, TensorError>;

/// Dense row-major f64 tensor.
///
/// The optional `node` handle ties a value to the [`Tape`] that produced it;
/// plain constructors leave it unset.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<NodeId>,
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> TensorResult<Self> {
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
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![0.0; len]),
            node: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; len]),
            node: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: Arc::new(vec![value]),
            node: None,
        }
    }

    /// I.i.d. normal(0, std^2) entries drawn from the given generator.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and positive");
        let len = shape.iter().product();
        let data: Vec<f64> = (0..len).map(|_| normal.sample(rng)).collect();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub(crate) fn with_node(mut self, node: NodeId) -> Self {
        self.node = Some(node);
        self
    }

    pub(crate) fn shared(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    pub(crate) fn from_shared(shape: Vec<usize>, data: Arc<Vec<f64>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            node: None,
        }
    }

    /// Copy with the tape handle cleared.
    pub fn detach(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar shape {:?}", self.shape);
        self.data[0]
    }

    /// Element of a rank-2 tensor.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    /// Mutable access to the underlying buffer (copy-on-write when shared).
    pub fn data_mut(&mut self) -> &mut [f64] {
        self.node = None;
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality of shape and payload.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Same payload under a new shape of equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> TensorResult<Tensor> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected,
                got: self.data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
            node: None,
        })
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 8 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(
                f,
                "Tensor{:?}[{} elements, first {:?}]",
                self.shape,
                self.data.len(),
                &self.data[..4]
            )
        }
    }
}
