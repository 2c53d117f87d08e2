//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every tensor created during one forward pass. Operations
//! append nodes in creation order, which is also a valid topological order,
//! so [`Tape::backward`] is a single reverse sweep. Handles into the tape are
//! plain [`Var`] indices.
//!
//! The engine is generic over [`Scalar`]: training runs in `f32`, gradient
//! verification in `f64`.
//!
//! Broadcasting is deliberately narrow. Binary elementwise ops accept
//! operands of identical shape or a single-element operand; row-wise bias
//! and scaling have their own ops ([`Tape::add_bias`], [`Tape::scale_rows`]).

mod backward;
pub mod gradcheck;
mod kernels;
mod ops;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use kernels::{sigmoid, softplus};
pub use ops::Unary;

/// Floating point element type usable on a tape.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Default + Send + Sync + Sum + AddAssign + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite constant")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Handle to a tensor on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation tags, used for fault injection and reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpTag {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Scale,
    AddBias,
    ScaleRows,
    LeakyRelu,
    Elu,
    Sigmoid,
    Tanh,
    Dropout,
    LayerNorm,
    SegmentSoftmax,
    IndexRows,
    ScatterAddRows,
    ConcatCols,
    SliceCols,
    Sum,
    Mean,
    L2NormalizeRows,
    FocalLoss,
    BceLoss,
    SupCon,
}

impl OpTag {
    pub fn name(self) -> &'static str {
        match self {
            OpTag::Leaf => "leaf",
            OpTag::MatMul => "matmul",
            OpTag::Transpose => "transpose",
            OpTag::Add => "add",
            OpTag::Sub => "sub",
            OpTag::Mul => "mul",
            OpTag::Scale => "scale",
            OpTag::AddBias => "add_bias",
            OpTag::ScaleRows => "scale_rows",
            OpTag::LeakyRelu => "leaky_relu",
            OpTag::Elu => "elu",
            OpTag::Sigmoid => "sigmoid",
            OpTag::Tanh => "tanh",
            OpTag::Dropout => "dropout",
            OpTag::LayerNorm => "layer_norm",
            OpTag::SegmentSoftmax => "segment_softmax",
            OpTag::IndexRows => "index_rows",
            OpTag::ScatterAddRows => "scatter_add_rows",
            OpTag::ConcatCols => "concat_cols",
            OpTag::SliceCols => "slice_cols",
            OpTag::Sum => "sum",
            OpTag::Mean => "mean",
            OpTag::L2NormalizeRows => "l2_normalize_rows",
            OpTag::FocalLoss => "focal_loss",
            OpTag::BceLoss => "bce_loss",
            OpTag::SupCon => "supcon",
        }
    }

    pub fn from_name(name: &str) -> Option<OpTag> {
        ALL_TAGS.iter().copied().find(|t| t.name() == name)
    }
}

const ALL_TAGS: [OpTag; 26] = [
    OpTag::Leaf,
    OpTag::MatMul,
    OpTag::Transpose,
    OpTag::Add,
    OpTag::Sub,
    OpTag::Mul,
    OpTag::Scale,
    OpTag::AddBias,
    OpTag::ScaleRows,
    OpTag::LeakyRelu,
    OpTag::Elu,
    OpTag::Sigmoid,
    OpTag::Tanh,
    OpTag::Dropout,
    OpTag::LayerNorm,
    OpTag::SegmentSoftmax,
    OpTag::IndexRows,
    OpTag::ScatterAddRows,
    OpTag::ConcatCols,
    OpTag::SliceCols,
    OpTag::Sum,
    OpTag::Mean,
    OpTag::L2NormalizeRows,
    OpTag::FocalLoss,
    OpTag::BceLoss,
    OpTag::SupCon,
];

/// Backward record: operation plus the parent handles and saved context
/// its gradient rule needs.
#[derive(Debug, Clone)]
pub(crate) enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { x: Var, rows: usize, cols: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: F },
    AddBias { x: Var, bias: Var, cols: usize },
    ScaleRows { x: Var, s: Var, cols: usize },
    Unary { x: Var, kind: Unary },
    Dropout { x: Var, mask: Vec<F> },
    LayerNorm { x: Var, gamma: Var, beta: Var, cols: usize, mean: Vec<F>, rstd: Vec<F> },
    SegmentSoftmax { x: Var, segments: Vec<usize>, n_segments: usize },
    IndexRows { x: Var, idx: Vec<usize>, cols: usize },
    ScatterAddRows { x: Var, idx: Vec<usize>, cols: usize },
    ConcatCols { parts: Vec<(Var, usize)>, rows: usize },
    SliceCols { x: Var, start: usize, in_cols: usize },
    Sum { x: Var },
    Mean { x: Var },
    L2NormalizeRows { x: Var, cols: usize, norms: Vec<F> },
    /// Scalar-valued fused losses keep their local gradient wrt the input.
    FusedLoss { x: Var, tag: OpTag, local_grad: Vec<F> },
}

impl<F> Op<F> {
    pub(crate) fn tag(&self) -> OpTag {
        match self {
            Op::Leaf => OpTag::Leaf,
            Op::MatMul { .. } => OpTag::MatMul,
            Op::Transpose { .. } => OpTag::Transpose,
            Op::Add { .. } => OpTag::Add,
            Op::Sub { .. } => OpTag::Sub,
            Op::Mul { .. } => OpTag::Mul,
            Op::Scale { .. } => OpTag::Scale,
            Op::AddBias { .. } => OpTag::AddBias,
            Op::ScaleRows { .. } => OpTag::ScaleRows,
            Op::Unary { kind, .. } => kind.tag(),
            Op::Dropout { .. } => OpTag::Dropout,
            Op::LayerNorm { .. } => OpTag::LayerNorm,
            Op::SegmentSoftmax { .. } => OpTag::SegmentSoftmax,
            Op::IndexRows { .. } => OpTag::IndexRows,
            Op::ScatterAddRows { .. } => OpTag::ScatterAddRows,
            Op::ConcatCols { .. } => OpTag::ConcatCols,
            Op::SliceCols { .. } => OpTag::SliceCols,
            Op::Sum { .. } => OpTag::Sum,
            Op::Mean { .. } => OpTag::Mean,
            Op::L2NormalizeRows { .. } => OpTag::L2NormalizeRows,
            Op::FusedLoss { tag, .. } => *tag,
        }
    }
}

/// One value on the tape.
#[derive(Debug, Clone)]
pub struct Tensor<F> {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<F>,
    pub(crate) grad: Option<Vec<F>>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn tag(&self) -> OpTag {
        self.op.tag()
    }
}

/// The ordered record of a forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape<F> {
    pub(crate) nodes: Vec<Tensor<F>>,
    fault: Option<OpTag>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Scales the gradient produced by one operation's backward rule by 1.5.
    /// Only used to prove that gradient verification catches broken rules.
    pub fn inject_fault(&mut self, tag: OpTag) {
        self.fault = Some(tag);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node, including intermediate gradients.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Trainable leaf.
    pub fn param(&mut self, shape: &[usize], data: Vec<F>) -> Result<Var> {
        self.leaf(shape, data, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, shape: &[usize], data: Vec<F>) -> Result<Var> {
        self.leaf(shape, data, false)
    }

    pub fn scalar_constant(&mut self, value: F) -> Var {
        self.push(vec![1], vec![value], false, Op::Leaf)
    }

    fn leaf(&mut self, shape: &[usize], data: Vec<F>, requires_grad: bool) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(crate::error::dim_err("leaf", shape, &[data.len()]));
        }
        Ok(self.push(shape.to_vec(), data, requires_grad, Op::Leaf))
    }

    pub(crate) fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<F>,
        requires_grad: bool,
        op: Op<F>,
    ) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Tensor {
            shape,
            data,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn tensor(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].data[0]
    }

    pub(crate) fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Propagates d(loss)/d(node) to every node reachable from `loss`.
    ///
    /// Gradients are added to whatever the nodes already hold, so calling
    /// this twice without [`Tape::zero_grad`] accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward on an empty tape".into()));
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut pass: Vec<Option<Vec<F>>> = vec![None; loss.0 + 1];
        pass[loss.0] = Some(vec![F::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(upstream) = pass[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            backward::propagate(self, idx, &upstream, &mut pass);
            let node = &mut self.nodes[idx];
            match node.grad.as_mut() {
                Some(g) => g.iter_mut().zip(&upstream).for_each(|(a, b)| *a += *b),
                None => node.grad = Some(upstream),
            }
        }
        Ok(())
    }

    pub(crate) fn fault_factor(&self, tag: OpTag) -> F {
        if self.fault == Some(tag) {
            F::of(1.5)
        } else {
            F::one()
        }
    }
}

pub(crate) fn accumulate<F: Scalar>(pass: &mut [Option<Vec<F>>], v: Var, len: usize, f: impl FnOnce(&mut [F])) {
    let slot = &mut pass[v.0];
    let buf = slot.get_or_insert_with(|| vec![F::zero(); len]);
    f(buf);
}
