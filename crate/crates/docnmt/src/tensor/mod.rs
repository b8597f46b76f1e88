//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! All values live on a [`Tape`]: each operation records enough to replay
//! its adjoint, and [`Tape::backward`] walks the record in reverse to
//! populate gradients. Handles are cheap [`Var`] indices; the tape owns
//! every [`Tensor`].

mod adam;
mod gradcheck;
mod ops;

pub use adam::{adam_step, AdamSlot};
pub use gradcheck::{check_gradients, GradCheckReport};
pub use ops::Op;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} implies {expected} elements, got {got}")]
    BadShape {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: expected a rank-{expected} tensor, got shape {shape:?}")]
    BadRank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: axis {axis} invalid for shape {shape:?}")]
    BadAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already run on this tape")]
    BackwardTwice,
    #[error("empty loss support: every position is masked out")]
    EmptyLossSupport,
    #[error("target id {id} out of range for vocabulary of {vocab}")]
    TargetOutOfRange { id: usize, vocab: usize },
    #[error("{op}: mask length {mask} does not cover {expected} entries")]
    BadMask {
        op: &'static str,
        mask: usize,
        expected: usize,
    },
    #[error("adam: parameter has {params} elements but state has {state}")]
    AdamStateMismatch { params: usize, state: usize },
    #[error("label smoothing must lie in [0, 1), got {0}")]
    BadSmoothing(f64),
}

/// Dense row-major tensor of rank 1 or 2.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::BadShape {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![x],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows/cols view of a rank-2 tensor; rank-1 counts as a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => unreachable!("tensors are rank 1 or 2"),
        }
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node {
    pub tensor: Tensor,
    pub op: Op,
}

/// Ordered record of executed operations; replaying adjoints in reverse
/// order yields gradients for every recorded operation.
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    backward_run: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_run: false,
        }
    }

    /// Records an input tensor; its `requires_grad` flag decides whether
    /// backward populates a gradient for it.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf)
    }

    /// Records a non-differentiable input (masks, dropout patterns).
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let mut t = tensor;
        t.requires_grad = false;
        self.push(t, Op::Leaf)
    }

    pub(crate) fn push(&mut self, tensor: Tensor, op: Op) -> Var {
        self.nodes.push(Node { tensor, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad.as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Populates gradients of every `requires_grad` ancestor of `loss`.
    ///
    /// `loss` must be scalar; a second call on the same tape is an error
    /// because recorded values would accumulate twice.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.backward_run {
            return Err(TensorError::BackwardTwice);
        }
        let l = &self.nodes[loss.0].tensor;
        if l.len() != 1 {
            return Err(TensorError::NonScalarLoss(l.shape.clone()));
        }
        self.backward_run = true;
        for i in 0..=loss.0 {
            let t = &mut self.nodes[i].tensor;
            if t.requires_grad {
                t.grad = Some(vec![0.0; t.len()]);
            }
        }
        if !self.nodes[loss.0].tensor.requires_grad {
            // loss does not depend on any differentiable input
            return Ok(());
        }
        if let Some(g) = self.nodes[loss.0].tensor.grad.as_mut() {
            g[0] = 1.0;
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tensor.requires_grad {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            ops::accumulate_adjoints(self, i, &op);
            self.nodes[i].op = op;
        }
        Ok(())
    }
}
