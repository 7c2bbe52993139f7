//! A small dense tensor type with tape-free reverse-mode differentiation.
//!
//! Every [`Tensor`] produced by an operation keeps a handle to its inputs
//! (when any of them requires a gradient), so the graph is an implicit DAG
//! of reference-counted nodes. [`Tensor::backward`] walks that DAG in
//! reverse topological order from a scalar loss and accumulates
//! `d loss / d leaf` into the gradient buffer of every leaf that requires
//! one. Intermediate gradients live only for the duration of the call.
//!
//! Tensors are immutable after creation apart from their gradient buffer.
//! Parameters are updated by replacing the leaf tensor (see
//! [`ParamStore::set_data`]).

mod backward;
mod gradcheck;
mod kernels;
pub(crate) mod ops;
mod params;

use std::cell::{Ref, RefCell};
use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use num_traits::{Float, FromPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub use gradcheck::{gradient_check, GradCheckOptions, GradCheckReport, ParamCheck};
pub use ops::{elementwise, Elementwise};
pub use params::{ParamId, ParamStore};

/// Scalar element type of a tensor. Implemented for `f32` (training and
/// inference) and `f64` (gradient checking).
pub trait Real:
    Float
    + FromPrimitive
    + Default
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Convert from `f64`, rounding to the nearest representable value.
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// How to fill a freshly created tensor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zero,
    One,
    Constant(f64),
    Uniform { lo: f64, hi: f64, seed: u64 },
    Normal { mean: f64, std: f64, seed: u64 },
}

/// Operation kinds that can appear in a recorded graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Ln,
    Exp,
    Sqrt,
    Sigmoid,
    Relu,
    Gelu,
    Scale,
    AddScalar,
    PowInt,
    Clamp,
    Polynomial,
    MatMul,
    Conv2d,
    Softmax,
    LayerNorm,
    GlobalAvgPool,
    Sum,
    Gather,
    Reshape,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Unary {
    Ln,
    Exp,
    Sqrt,
    Sigmoid,
    Relu,
    Gelu,
    Scale(f64),
    AddScalar(f64),
    PowInt(i32),
    Clamp { lo: f64, hi: f64 },
    /// Coefficients in increasing degree: `c[0] + c[1] x + c[2] x^2 + ...`.
    Polynomial(Vec<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Binary {
    Add,
    Sub,
    Mul,
}

pub(crate) enum Op<T: Real> {
    Leaf,
    Unary {
        input: Tensor<T>,
        kind: Unary,
    },
    /// `b` is broadcast into the shape of `a`.
    Binary {
        a: Tensor<T>,
        b: Tensor<T>,
        kind: Binary,
    },
    MatMul {
        a: Tensor<T>,
        b: Tensor<T>,
    },
    Conv2d {
        input: Tensor<T>,
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
        stride: usize,
        pad: usize,
        /// im2col buffers, one `[C*kh*kw, Ho*Wo]` block per batch item.
        cols: Vec<T>,
    },
    Softmax {
        input: Tensor<T>,
        axis: usize,
    },
    LayerNorm {
        input: Tensor<T>,
        gain: Tensor<T>,
        offset: Tensor<T>,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    GlobalAvgPool {
        input: Tensor<T>,
    },
    Sum {
        input: Tensor<T>,
    },
    /// `out[i] = input[index[i]]`
    Gather {
        input: Tensor<T>,
        index: Rc<[usize]>,
    },
    Reshape {
        input: Tensor<T>,
    },
}

impl<T: Real> Op<T> {
    pub(crate) fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Unary { kind, .. } => match kind {
                Unary::Ln => OpKind::Ln,
                Unary::Exp => OpKind::Exp,
                Unary::Sqrt => OpKind::Sqrt,
                Unary::Sigmoid => OpKind::Sigmoid,
                Unary::Relu => OpKind::Relu,
                Unary::Gelu => OpKind::Gelu,
                Unary::Scale(_) => OpKind::Scale,
                Unary::AddScalar(_) => OpKind::AddScalar,
                Unary::PowInt(_) => OpKind::PowInt,
                Unary::Clamp { .. } => OpKind::Clamp,
                Unary::Polynomial(_) => OpKind::Polynomial,
            },
            Op::Binary { kind, .. } => match kind {
                Binary::Add => OpKind::Add,
                Binary::Sub => OpKind::Sub,
                Binary::Mul => OpKind::Mul,
            },
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::GlobalAvgPool { .. } => OpKind::GlobalAvgPool,
            Op::Sum { .. } => OpKind::Sum,
            Op::Gather { .. } => OpKind::Gather,
            Op::Reshape { .. } => OpKind::Reshape,
        }
    }

    pub(crate) fn inputs(&self) -> Vec<&Tensor<T>> {
        match self {
            Op::Leaf => vec![],
            Op::Unary { input, .. }
            | Op::Softmax { input, .. }
            | Op::GlobalAvgPool { input }
            | Op::Sum { input }
            | Op::Gather { input, .. }
            | Op::Reshape { input } => vec![input],
            Op::Binary { a, b, .. } | Op::MatMul { a, b } => vec![a, b],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => {
                let mut v = vec![input, weight];
                if let Some(b) = bias {
                    v.push(b);
                }
                v
            }
            Op::LayerNorm {
                input,
                gain,
                offset,
                ..
            } => vec![input, gain, offset],
        }
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

pub(crate) struct Node<T: Real> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
    grad: RefCell<Option<Vec<T>>>,
}

/// Dense row-major N-dimensional array that participates in reverse-mode
/// differentiation. Cloning is cheap (reference counted).
pub struct Tensor<T: Real = f32> {
    node: Rc<Node<T>>,
}

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.node.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("op", &self.node.op.kind())
            .field("requires_grad", &self.node.requires_grad)
            .field("data", &preview)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "shape must have at least one axis".into(),
        });
    }
    if shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "every extent must be at least 1".into(),
        });
    }
    Ok(())
}

impl<T: Real> Tensor<T> {
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<T>, op: Op<T>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = op.inputs().iter().any(|t| t.requires_grad());
        // Nothing upstream needs a gradient, so the graph can be dropped.
        let op = if requires_grad { op } else { Op::Leaf };
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                op,
                grad: RefCell::new(None),
            }),
        }
    }

    fn leaf(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                op: Op::Leaf,
                grad: RefCell::new(None),
            }),
        }
    }

    /// Create a constant (non-trainable) tensor filled per `init`.
    pub fn create(shape: &[usize], init: Init) -> Result<Self> {
        check_shape(shape)?;
        let n = numel(shape);
        let data = match init {
            Init::Zero => vec![T::zero(); n],
            Init::One => vec![T::one(); n],
            Init::Constant(c) => vec![T::of(c); n],
            Init::Uniform { lo, hi, seed } => {
                if !(lo < hi) {
                    return Err(Error::Config(format!(
                        "uniform init needs lo < hi, got [{lo}, {hi}]"
                    )));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n)
                    .map(|_| T::of(lo + (hi - lo) * rng.random::<f64>()))
                    .collect()
            }
            Init::Normal { mean, std, seed } => {
                let dist = Normal::new(mean, std)
                    .map_err(|e| Error::Config(format!("normal init: {e}")))?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n).map(|_| T::of(dist.sample(&mut rng))).collect()
            }
        };
        Ok(Self::leaf(shape.to_vec(), data, false))
    }

    /// Wrap existing data as a constant tensor.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape(shape)?;
        if numel(shape) != data.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("expected {} elements, got {}", numel(shape), data.len()),
            });
        }
        Ok(Self::leaf(shape.to_vec(), data, false))
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn scalar(v: f64) -> Self {
        Self::leaf(vec![1], vec![T::of(v)], false)
    }

    /// A trainable leaf holding `data`.
    pub fn parameter(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let t = Self::from_vec(shape, data)?;
        Ok(Self::leaf(t.node.shape.clone(), t.into_data(), true))
    }

    /// Same data as a fresh leaf that requires a gradient.
    pub fn requiring_grad(&self) -> Self {
        Self::leaf(self.node.shape.clone(), self.node.data.clone(), true)
    }

    /// Same data as a fresh constant leaf, cut from any graph.
    pub fn detach(&self) -> Self {
        Self::leaf(self.node.shape.clone(), self.node.data.clone(), false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.node.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.node.data.iter().map(|v| v.as_f64()).collect()
    }

    fn into_data(self) -> Vec<T> {
        match Rc::try_unwrap(self.node) {
            Ok(node) => node.data,
            Err(rc) => rc.data.clone(),
        }
    }

    /// The value of a one-element tensor.
    pub fn item(&self) -> T {
        self.node.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn op_kind(&self) -> OpKind {
        self.node.op.kind()
    }

    pub(crate) fn op(&self) -> &Op<T> {
        &self.node.op
    }

    pub(crate) fn id(&self) -> u64 {
        self.node.id
    }

    /// Accumulated gradient, if `backward` has reached this leaf.
    pub fn grad(&self) -> Option<Ref<'_, Vec<T>>> {
        let g = self.node.grad.borrow();
        if g.is_some() {
            Some(Ref::map(g, |g| g.as_ref().unwrap()))
        } else {
            None
        }
    }

    pub fn grad_vec(&self) -> Option<Vec<T>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad_owned(&self, g: Vec<T>) {
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            None => *slot = Some(g),
        }
    }

    #[cfg(test)]
    pub(crate) fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Op kinds of every node reachable from this tensor (itself included).
    pub fn graph_op_kinds(&self) -> BTreeSet<OpKind> {
        let mut kinds = BTreeSet::new();
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.id()) {
                continue;
            }
            kinds.insert(t.op_kind());
            stack.extend(t.op().inputs().into_iter().cloned());
        }
        kinds
    }

    /// Copy into another precision (drops the graph).
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::leaf(
            self.node.shape.clone(),
            self.node.data.iter().map(|v| U::of(v.as_f64())).collect(),
            false,
        )
    }

    pub fn all_finite(&self) -> bool {
        self.node.data.iter().all(|v| v.is_finite())
    }
}
