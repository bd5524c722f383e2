//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every forward op appends one node holding its output value and the data its
//! backward rule needs. Nodes are created in topological order, so a reverse
//! sweep visits each node once after all of its consumers.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::ConvGeom;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddTrailing(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Abs(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Relu(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
        batch_stats: bool,
        channels: usize,
        plane: usize,
    },
    Sum(Var),
    Mean(Var),
    ReduceAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
        mean: bool,
    },
    Reshape(Var),
    Permute {
        x: Var,
        index: Vec<usize>,
    },
    Gather {
        x: Var,
        rows: Vec<Option<usize>>,
        row_len: usize,
    },
    ScatterAdd {
        x: Var,
        rows: Vec<usize>,
        row_len: usize,
    },
    SegmentMean {
        x: Var,
        segments: Vec<Vec<usize>>,
        row_len: usize,
    },
    ScaleRows {
        x: Var,
        w: Var,
        row_len: usize,
    },
    ConcatCols {
        a: Var,
        b: Var,
        ca: usize,
        cb: usize,
    },
    TopKSoftmax {
        x: Var,
        selected: Vec<usize>,
        k: usize,
        cols: usize,
    },
    NegEntropyMean {
        x: Var,
        rows: usize,
    },
    Focal {
        pred: Var,
        target: Vec<f64>,
        gamma: f64,
        beta: f64,
        npos: f64,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddTrailing(a, b) | MatMul(a, b) => vec![*a, *b],
            Scale(x, _) | AddScalar(x) | Abs(x) | Gelu(x) | Sigmoid(x) | Relu(x) | Sum(x)
            | Mean(x) | Reshape(x) => vec![*x],
            Linear { x, w, b } | Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            BatchMatMul { a, b, .. } => vec![*a, *b],
            LayerNorm { x, gamma, beta, .. } | BatchNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Softmax { x, .. }
            | ReduceAxis { x, .. }
            | Permute { x, .. }
            | Gather { x, .. }
            | ScatterAdd { x, .. }
            | SegmentMean { x, .. }
            | TopKSoftmax { x, .. }
            | NegEntropyMean { x, .. } => vec![*x],
            ScaleRows { x, w, .. } => vec![*x, *w],
            ConcatCols { a, b, .. } => vec![*a, *b],
            Focal { pred, .. } => vec![*pred],
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
}

/// Append-only record of a forward computation.
///
/// A tape belongs to one forward/backward pass on one thread.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// Records a leaf that accumulates gradients.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    /// Records a leaf, keeping the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        t.grad = None;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
    }

    pub(crate) fn push(&mut self, name: &'static str, shape: &[usize], data: Vec<f64>, op: Op) -> Result<Var> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].value.requires_grad);
        let value = Tensor::new(shape, data)?.with_requires_grad(requires_grad);
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Populates `grad` of every gradient-requiring leaf with d(loss)/d(leaf).
    ///
    /// Leaf gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.value.requires_grad {
                grads[id] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_op(&node.op, &node.value, &g, &mut grads);
        }
        for (id, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let node = &mut self.nodes[id];
            if !matches!(node.op, Op::Leaf) || !node.value.requires_grad {
                continue;
            }
            match &mut node.value.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.value.grad = Some(g),
            }
        }
        Ok(())
    }

    /// Gradient slot for `v`, or `None` if `v` does not need one.
    pub(crate) fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.value.requires_grad {
            return None;
        }
        let n = node.value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }
}
