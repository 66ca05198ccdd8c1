//! Dense n-d arrays and a dynamic reverse-mode tape.
//!
//! A [`Graph`] records every operation as a node holding its output value.
//! Nodes are appended in evaluation order, so reverse index order is a valid
//! topological order for [`Graph::backward`]. A [`Var`] is a cheap handle
//! into one graph; it is meaningless in any other graph.
//!
//! The graph is rebuilt for every forward pass and never mutated in place.

mod backward;
mod check;
mod kernels;
mod ops;

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

pub use check::finite_diff_check;

/// Owned n-d array in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::contract("tensor dimensions must be positive"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("tensor", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn scalar(x: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![x],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Element `[i, j]` of a 2-d tensor.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    /// Row `i` of a tensor viewed as `[shape[0], rest]`.
    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.data.len() / self.shape[0];
        &self.data[i * w..(i + 1) * w]
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Glu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    SliceLast {
        x: Var,
        start: usize,
    },
    ConcatLast(Var, Var),
    ConcatRows(Vec<Var>),
    AttnScores {
        q: Var,
        k: Var,
        heads: usize,
        scale: f64,
    },
    AttnContext {
        w: Var,
        v: Var,
        heads: usize,
    },
    DepthwiseConv {
        x: Var,
        kernel: Var,
        causal: bool,
    },
    DynamicConv {
        x: Var,
        kernels: Var,
        causal: bool,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
        scale: f64,
    },
    MulConst {
        x: Var,
        factors: Vec<f64>,
    },
    SmoothedCe {
        logits: Var,
        targets: Vec<Option<usize>>,
        eps: f64,
        probs: Vec<f64>,
    },
}

/// Reverse-mode tape. Confined to one thread; independent graphs may run
/// concurrently.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    macs: Option<u64>,
    paused: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose forward kernels count every scalar multiply-accumulate.
    pub fn with_mac_counter() -> Self {
        Self {
            macs: Some(0),
            ..Self::default()
        }
    }

    /// Multiply-accumulates executed so far, if counting is enabled.
    pub fn macs(&self) -> Option<u64> {
        self.macs
    }

    /// Temporarily exclude work from the counter (e.g. the vocabulary
    /// projection, which the cost model leaves out).
    pub fn set_counting_paused(&mut self, paused: bool) {
        self.paused = paused;
    }

    pub(crate) fn counting(&self) -> bool {
        self.macs.is_some() && !self.paused
    }

    pub(crate) fn add_macs(&mut self, n: u64) {
        if let Some(m) = self.macs.as_mut() {
            *m += n;
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf. Only leaves with `requires_grad` (and nodes derived
    /// from them) ever receive a gradient.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape: t.shape,
            value: t.data,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Graph::backward`], if any reached
    /// this node.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }
}

/// `(outer, len, inner)` strides for reducing over `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
