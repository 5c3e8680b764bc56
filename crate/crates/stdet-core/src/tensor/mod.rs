//! Dense tensor engine with reverse-mode automatic differentiation.
//!
//! Everything is recorded on an eager tape owned by [`Tape`]. Ops append
//! nodes; node ids are topologically ordered by construction, so backward
//! is a single reverse sweep. The tape is not shared across threads and is
//! rebuilt for every training step.

mod adam;
mod attention;
mod conv;
mod gradcheck;
mod loss;
mod norm;
mod ops;

pub use adam::{Adam, AdamConfig};
pub use attention::{AttentionWeights, TransformerWeights};
pub use gradcheck::{grad_check, grad_check_subset, GradCheckReport};

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use thiserror::Error;

/// Scalar element of a tensor. Implemented for `f32` (training) and
/// `f64` (gradient checking).
pub trait Elem:
    Copy
    + Send
    + Sync
    + PartialOrd
    + Debug
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp_e(self) -> Self;
    fn ln_e(self) -> Self;
    fn sqrt_e(self) -> Self;
    fn abs_e(self) -> Self;
    fn max_e(self, o: Self) -> Self;
    fn min_e(self, o: Self) -> Self;
    fn is_finite_e(self) -> bool;
}

macro_rules! impl_elem {
    ($t:ty) => {
        impl Elem for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp_e(self) -> Self {
                self.exp()
            }
            #[inline]
            fn ln_e(self) -> Self {
                self.ln()
            }
            #[inline]
            fn sqrt_e(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn abs_e(self) -> Self {
                self.abs()
            }
            #[inline]
            fn max_e(self, o: Self) -> Self {
                self.max(o)
            }
            #[inline]
            fn min_e(self, o: Self) -> Self {
                self.min(o)
            }
            #[inline]
            fn is_finite_e(self) -> bool {
                self.is_finite()
            }
        }
    };
}
impl_elem!(f32);
impl_elem!(f64);

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: {dim} (={value}) must be divisible by {by}")]
    NotDivisible {
        op: &'static str,
        dim: &'static str,
        value: usize,
        by: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this tape; rebuild the graph before calling it again")]
    BackwardTwice,
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Resampling mode for spatial rescaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleMode {
    Nearest,
    Bilinear,
}

/// Power-of-two spatial scale factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleFactor {
    Down4,
    Down2,
    One,
    Up2,
    Up4,
}

impl ScaleFactor {
    pub fn from_ratio(num: usize, den: usize) -> Result<Self> {
        match (num, den) {
            (1, 4) => Ok(ScaleFactor::Down4),
            (1, 2) => Ok(ScaleFactor::Down2),
            (1, 1) => Ok(ScaleFactor::One),
            (2, 1) => Ok(ScaleFactor::Up2),
            (4, 1) => Ok(ScaleFactor::Up4),
            _ => Err(TensorError::Invalid(format!(
                "unsupported resample factor {num}/{den}; must be one of 1/4, 1/2, 1, 2, 4"
            ))),
        }
    }

    /// (numerator, denominator)
    pub fn ratio(self) -> (usize, usize) {
        match self {
            ScaleFactor::Down4 => (1, 4),
            ScaleFactor::Down2 => (1, 2),
            ScaleFactor::One => (1, 1),
            ScaleFactor::Up2 => (2, 1),
            ScaleFactor::Up4 => (4, 1),
        }
    }

    pub fn apply(self, extent: usize) -> usize {
        let (n, d) = self.ratio();
        extent * n / d
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op<S: Elem> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, S),
    AddScalar(usize, S),
    Relu(usize),
    Sigmoid(usize),
    Sqrt(usize),
    Matmul {
        a: usize,
        b: usize,
    },
    /// Batched matmul \[B,m,k\] x \[B,k,n\].
    Bmm {
        a: usize,
        b: usize,
    },
    /// Batched matmul with transposed rhs: \[B,m,k\] x \[B,n,k\] -> \[B,m,n\].
    BmmNt {
        a: usize,
        b: usize,
    },
    Reshape(usize),
    Permute {
        input: usize,
        perm: Vec<usize>,
    },
    SoftmaxLast(usize),
    Sum(usize),
    Mean(usize),
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        stride: usize,
        padding: usize,
    },
    Resample {
        input: usize,
        factor: ScaleFactor,
        mode: ResampleMode,
    },
    SliceChannels {
        input: usize,
        start: usize,
        count: usize,
    },
    ConcatChannels {
        inputs: Vec<usize>,
    },
    GroupNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        groups: usize,
        eps: f64,
    },
    LayerNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
    },
    /// Broadcast add of a \[D\] bias over the last axis.
    AddBiasLast {
        input: usize,
        bias: usize,
    },
    BceWithLogits {
        logits: usize,
        targets: usize,
    },
    SmoothL1 {
        pred: usize,
        target: usize,
    },
    /// Bilinear read of a \[C,H,W\] map at fixed sub-pixel points -> \[P,C\].
    GatherBilinear {
        map: usize,
        points: Vec<(f64, f64)>,
    },
}

#[derive(Debug)]
pub(crate) struct Node<S: Elem> {
    pub shape: Vec<usize>,
    pub values: Vec<S>,
    pub grad: Option<Vec<S>>,
    pub requires_grad: bool,
    pub op: Op<S>,
}

/// Eager autodiff tape. Owns every tensor created during one forward pass.
pub struct Tape<S: Elem> {
    pub(crate) nodes: Vec<Node<S>>,
    backward_done: bool,
}

impl<S: Elem> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Elem> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, values: Vec<S>, op: Op<S>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        debug_assert!(
            values.iter().all(|v| v.is_finite_e()),
            "non-finite forward value"
        );
        let requires_grad = match &op {
            Op::Leaf => false,
            other => self.op_inputs(other).iter().any(|&i| self.nodes[i].requires_grad),
        };
        self.nodes.push(Node {
            shape,
            values,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn op_inputs(&self, op: &Op<S>) -> Vec<usize> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Matmul { a, b }
            | Op::Bmm { a, b }
            | Op::BmmNt { a, b } => vec![*a, *b],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Sqrt(a)
            | Op::Reshape(a)
            | Op::SoftmaxLast(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::Permute { input, .. }
            | Op::Resample { input, .. }
            | Op::SliceChannels { input, .. } => vec![*input],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => vec![*input, *weight, *bias],
            Op::ConcatChannels { inputs } => inputs.clone(),
            Op::GroupNorm {
                input, gamma, beta, ..
            }
            | Op::LayerNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::AddBiasLast { input, bias } => vec![*input, *bias],
            Op::BceWithLogits { logits, targets } => vec![*logits, *targets],
            Op::SmoothL1 { pred, target } => vec![*pred, *target],
            Op::GatherBilinear { map, .. } => vec![*map],
        }
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, shape: &[usize], values: Vec<S>, requires_grad: bool) -> Var {
        let v = self.push(shape.to_vec(), values, Op::Leaf);
        self.nodes[v.0].requires_grad = requires_grad;
        v
    }

    /// Non-trainable input.
    pub fn constant(&mut self, shape: &[usize], values: Vec<S>) -> Var {
        self.leaf(shape, values, false)
    }

    pub fn scalar(&mut self, v: S) -> Var {
        self.constant(&[1], vec![v])
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn values(&self, v: Var) -> &[S] {
        &self.nodes[v.0].values
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn value_scalar(&self, v: Var) -> S {
        debug_assert_eq!(self.nodes[v.0].values.len(), 1);
        self.nodes[v.0].values[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Drops every node recorded after `mark` (a previous [`len`]), so a
    /// fixed prefix can be reused across repeated forward passes without
    /// the tape growing. Any `Var` issued after the mark becomes invalid.
    ///
    /// [`len`]: Tape::len
    pub fn truncate(&mut self, mark: usize) {
        assert!(mark <= self.nodes.len(), "mark {mark} beyond tape");
        self.nodes.truncate(mark);
        self.backward_done = false;
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Reverse sweep from a scalar loss. Populates `grad` on every
    /// reachable node with `requires_grad`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if self.nodes[loss.0].values.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![S::ONE]);
        for id in (0..=loss.0).rev() {
            if self.nodes[id].grad.is_none() || matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            self.backstep(id);
        }
        Ok(())
    }

    pub(crate) fn ensure_grad(&mut self, id: usize) {
        if self.nodes[id].grad.is_none() {
            let n = self.nodes[id].values.len();
            self.nodes[id].grad = Some(vec![S::ZERO; n]);
        }
    }

    /// Accumulates into `id`'s input grads; only called for non-leaf nodes
    /// whose grad is populated.
    fn backstep(&mut self, id: usize) {
        let op = self.nodes[id].op.clone();
        for &inp in self.op_inputs(&op).iter() {
            if self.nodes[inp].requires_grad || !matches!(self.nodes[inp].op, Op::Leaf) {
                self.ensure_grad(inp);
            }
        }
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let g = self.nodes[id].grad.clone().unwrap();
                self.accumulate(a, &g);
                self.accumulate(b, &g);
            }
            Op::Sub(a, b) => {
                let g = self.nodes[id].grad.clone().unwrap();
                self.accumulate(a, &g);
                let neg: Vec<S> = g.iter().map(|&x| -x).collect();
                self.accumulate(b, &neg);
            }
            Op::Mul(a, b) => {
                let g = self.nodes[id].grad.clone().unwrap();
                let da: Vec<S> = g
                    .iter()
                    .zip(self.nodes[b].values.iter())
                    .map(|(&g, &bv)| g * bv)
                    .collect();
                let db: Vec<S> = g
                    .iter()
                    .zip(self.nodes[a].values.iter())
                    .map(|(&g, &av)| g * av)
                    .collect();
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Neg(a) => {
                let g = self.nodes[id].grad.clone().unwrap();
                let da: Vec<S> = g.iter().map(|&x| -x).collect();
                self.accumulate(a, &da);
            }
            Op::Scale(a, c) => {
                let g = self.nodes[id].grad.clone().unwrap();
                let da: Vec<S> = g.iter().map(|&x| x * c).collect();
                self.accumulate(a, &da);
            }
            Op::AddScalar(a, _) => {
                let g = self.nodes[id].grad.clone().unwrap();
                self.accumulate(a, &g);
            }
            Op::Relu(a) => {
                let g = self.nodes[id].grad.clone().unwrap();
                let da: Vec<S> = g
                    .iter()
                    .zip(self.nodes[a].values.iter())
                    .map(|(&g, &x)| if x > S::ZERO { g } else { S::ZERO })
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Sigmoid(a) => {
                let g = self.nodes[id].grad.clone().unwrap();
                let da: Vec<S> = g
                    .iter()
                    .zip(self.nodes[id].values.iter())
                    .map(|(&g, &y)| g * y * (S::ONE - y))
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Sqrt(a) => {
                let g = self.nodes[id].grad.clone().unwrap();
                let half = S::from_f64(0.5);
                let da: Vec<S> = g
                    .iter()
                    .zip(self.nodes[id].values.iter())
                    .map(|(&g, &y)| g * half / y)
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Matmul { a, b } => ops::matmul_backward(self, id, a, b),
            Op::Bmm { a, b } => ops::bmm_backward(self, id, a, b, false),
            Op::BmmNt { a, b } => ops::bmm_backward(self, id, a, b, true),
            Op::Reshape(a) => {
                let g = self.nodes[id].grad.clone().unwrap();
                self.accumulate(a, &g);
            }
            Op::Permute { input, ref perm } => ops::permute_backward(self, id, input, perm),
            Op::SoftmaxLast(a) => ops::softmax_backward(self, id, a),
            Op::Sum(a) => {
                let g = self.nodes[id].grad.as_ref().unwrap()[0];
                let da = vec![g; self.nodes[a].values.len()];
                self.accumulate(a, &da);
            }
            Op::Mean(a) => {
                let n = self.nodes[a].values.len();
                let g = self.nodes[id].grad.as_ref().unwrap()[0] / S::from_f64(n as f64);
                let da = vec![g; n];
                self.accumulate(a, &da);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => conv::conv2d_backward(self, id, input, weight, bias, stride, padding),
            Op::Resample {
                input,
                factor,
                mode,
            } => conv::resample_backward(self, id, input, factor, mode),
            Op::SliceChannels {
                input,
                start,
                count,
            } => conv::slice_channels_backward(self, id, input, start, count),
            Op::ConcatChannels { ref inputs } => {
                let inputs = inputs.clone();
                conv::concat_channels_backward(self, id, &inputs)
            }
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                eps,
            } => norm::group_norm_backward(self, id, input, gamma, beta, groups, eps),
            Op::LayerNorm {
                input,
                gamma,
                beta,
                eps,
            } => norm::layer_norm_backward(self, id, input, gamma, beta, eps),
            Op::AddBiasLast { input, bias } => ops::add_bias_last_backward(self, id, input, bias),
            Op::BceWithLogits { logits, targets } => {
                loss::bce_with_logits_backward(self, id, logits, targets)
            }
            Op::SmoothL1 { pred, target } => loss::smooth_l1_backward(self, id, pred, target),
            Op::GatherBilinear { map, ref points } => {
                let points = points.clone();
                conv::gather_bilinear_backward(self, id, map, &points)
            }
        }
    }

    pub(crate) fn accumulate(&mut self, id: usize, delta: &[S]) {
        if let Some(g) = self.nodes[id].grad.as_mut() {
            debug_assert_eq!(g.len(), delta.len());
            for (gi, &d) in g.iter_mut().zip(delta.iter()) {
                *gi += d;
            }
        }
    }

    /// True when every stored value on the tape is finite.
    pub fn all_finite(&self, v: Var) -> bool {
        self.nodes[v.0].values.iter().all(|x| x.is_finite_e())
    }
}

pub(crate) fn check_same_shape<S: Elem>(
    op: &'static str,
    t: &Tape<S>,
    a: Var,
    b: Var,
) -> Result<()> {
    if t.shape(a) != t.shape(b) {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", t.shape(a), t.shape(b)),
        });
    }
    Ok(())
}
