//! Dense tensor storage plus tape-based reverse-mode autodiff.
//!
//! Everything the transformer needs lives here: matmul, softmax, layer norm,
//! GELU, sigmoid, elementwise arithmetic, reductions, and row/column
//! gather/scatter. Values are kept in f64 buffers; a tape created with
//! [`DType::F32`] rounds every op result through f32 so single-precision
//! behaviour can be exercised without a second storage path.
//!
//! A [`Tape`] owns all node buffers. [`Tensor`] is a cheap handle
//! (tape + node id). One tape is single-threaded; independent model
//! instances use independent tapes.

mod io;
mod ops;

pub use io::{read_tensor, write_tensor, RawTensor};
pub use ops::{concat_cols, concat_rows};

use std::cell::RefCell;
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {op} got {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("index {index} out of bounds for extent {extent} in {op}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this tape; reset before calling again")]
    BackwardAlreadyRan,
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("tensors belong to different tapes")]
    TapeMismatch,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad tensor record: {0}")]
    BadRecord(String),
}

/// Scalar precision of a tape. Storage is always f64; `F32` rounds each op
/// result through f32.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Transpose { x: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    AddRow { x: usize, row: usize },
    Scale { x: usize, c: f64 },
    AddConst { x: usize },
    ScaleByScalar { x: usize, s: usize },
    Neg { x: usize },
    Sigmoid { x: usize },
    Gelu { x: usize },
    Exp { x: usize },
    Ln { x: usize },
    Softmax { x: usize },
    LogSoftmax { x: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, eps: f64 },
    MeanAll { x: usize },
    SumAll { x: usize },
    GatherRows { x: usize, indices: Vec<usize> },
    ScatterRows { x: usize, indices: Vec<usize> },
    ConcatRows { parts: Vec<usize> },
    GatherCols { x: usize, indices: Vec<usize> },
    ConcatCols { parts: Vec<usize> },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    grad: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

struct TapeInner {
    nodes: Vec<Node>,
    dtype: DType,
    check_finite: bool,
    backward_done: bool,
    flops: u64,
}

/// Shared recording tape. Clone is a cheap handle to the same tape.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to one node on a tape.
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    id: usize,
    shape: Vec<usize>,
}

impl Tape {
    pub fn new(dtype: DType) -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                dtype,
                check_finite: cfg!(debug_assertions),
                backward_done: false,
                flops: 0,
            })),
        }
    }

    pub fn dtype(&self) -> DType {
        self.inner.borrow().dtype
    }

    /// Toggle the per-op finiteness assertion (on by default in debug builds).
    pub fn set_check_finite(&self, on: bool) {
        self.inner.borrow_mut().check_finite = on;
    }

    /// Arithmetic ops recorded so far, 1 multiply-accumulate = 2 FLOPs.
    pub fn flops(&self) -> u64 {
        self.inner.borrow().flops
    }

    pub fn reset_flops(&self) {
        self.inner.borrow_mut().flops = 0;
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn push(&self, data: Vec<f64>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let mut inner = self.inner.borrow_mut();
        let mut data = data;
        if inner.dtype == DType::F32 {
            for v in data.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
        if inner.check_finite && !matches!(op, Op::Leaf) {
            if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
                panic!("non-finite value {bad} produced by {op:?}");
            }
        }
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            grad: Vec::new(),
            data,
            shape: shape.clone(),
            op,
            requires_grad,
        });
        Tensor {
            tape: self.clone(),
            id,
            shape,
        }
    }

    fn count_flops(&self, n: u64) {
        self.inner.borrow_mut().flops += n;
    }

    /// Leaf tensor that participates in gradients.
    pub fn param(&self, data: Vec<f64>, shape: Vec<usize>) -> Tensor {
        self.push(data, shape, Op::Leaf, true)
    }

    /// Leaf tensor excluded from gradients.
    pub fn constant(&self, data: Vec<f64>, shape: Vec<usize>) -> Tensor {
        self.push(data, shape, Op::Leaf, false)
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.constant(vec![v], vec![1])
    }

    pub fn zeros(&self, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        self.constant(vec![0.0; n], shape)
    }

    pub fn ones(&self, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        self.constant(vec![1.0; n], shape)
    }

    /// Reverse-mode sweep from a scalar loss. Populates grads on every node
    /// reachable from the loss; leaf grads are read back via
    /// [`Tensor::grad`].
    pub fn backward(&self, loss: &Tensor) -> Result<(), TensorError> {
        if !self.same_tape(&loss.tape) {
            return Err(TensorError::TapeMismatch);
        }
        let mut inner = self.inner.borrow_mut();
        if inner.backward_done {
            return Err(TensorError::BackwardAlreadyRan);
        }
        if loss.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss.shape.clone()));
        }
        inner.backward_done = true;
        for node in inner.nodes.iter_mut() {
            node.grad = vec![0.0; node.data.len()];
        }
        inner.nodes[loss.id].grad[0] = 1.0;
        for id in (0..=loss.id).rev() {
            ops::backprop_node(&mut inner.nodes, id);
        }
        Ok(())
    }
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Copy of the forward values.
    pub fn value(&self) -> Vec<f64> {
        self.tape.inner.borrow().nodes[self.id].data.clone()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.tape.inner.borrow().nodes[self.id].data[0]
    }

    /// Gradient populated by the last backward sweep, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        let inner = self.tape.inner.borrow();
        let g = &inner.nodes[self.id].grad;
        if g.is_empty() {
            None
        } else {
            Some(g.clone())
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    pub(crate) fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[0]
        }
    }

    pub(crate) fn row_len(&self) -> usize {
        let rows = self.rows();
        if rows == 0 {
            0
        } else {
            self.numel() / rows
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape)
            .finish()
    }
}
