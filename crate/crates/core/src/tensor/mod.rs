//! Dense tensors recorded on a reverse-mode autodiff tape.
//!
//! A [`Tape`] owns every tensor of one forward/backward pass. Operations
//! append nodes and return [`Val`] handles; `backward` walks the recorded
//! ops in reverse and accumulates gradients into tracked leaves. Gradient
//! accumulation is additive until `zero_grad` is called. There is no
//! implicit broadcasting: elementwise ops demand identical shapes and the
//! only broadcast form is the explicit `add_row`.

mod check;
mod kernels;
mod ops;

pub use check::{grad_check, GradFailure, GradReport};
pub use kernels::{gelu, matmul_into, stable_sigmoid, stable_softplus};

use crate::error::{Error, Result};
use std::fmt::{Debug, Display};

/// Scalar element type of a tape: `f64` for verification, `f32` for training.
pub trait Real:
    num_traits::Float + num_traits::NumAssign + Send + Sync + Debug + Display + Default + 'static
{
    fn from_f64(x: f64) -> Self {
        num_traits::cast(x).expect("finite f64 converts to Real")
    }
    fn as_f64(self) -> f64 {
        num_traits::cast::<Self, f64>(self).expect("Real converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Handle to a tensor on a tape. Only valid for the tape that produced it.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Val(pub(crate) usize);

pub(crate) enum Op<T> {
    Leaf { tracked: bool },
    Add(Val, Val),
    Sub(Val, Val),
    Mul(Val, Val),
    Div(Val, Val),
    MinE(Val, Val),
    MaxE(Val, Val),
    Neg(Val),
    Abs(Val),
    Relu(Val),
    Gelu(Val),
    Sigmoid(Val),
    Softplus(Val),
    Ln(Val),
    Scale(Val, T),
    AddScalar(Val, T),
    Matmul(Val, Val),
    Transpose(Val),
    AddRow(Val, Val),
    RowDot(Val, Val),
    Gather { src: Val, map: Vec<i64> },
    ConcatRows(Vec<Val>),
    ConcatCols(Vec<Val>),
    Softmax { src: Val, axis: usize },
    LayerNorm { src: Val, gamma: Val, beta: Val, eps: T },
    SumAll(Val),
    MeanAll(Val),
    MeanRows(Val),
    WeightedCe { logits: Val, targets: Vec<usize>, class_weights: Vec<T> },
    GradReverse { src: Val, strength: T },
}

pub(crate) struct Node<T> {
    pub data: Vec<T>,
    pub shape: Vec<usize>,
    /// Persistent accumulator; allocated only for tracked leaves.
    pub grad: Option<Vec<T>>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Computation graph: an append-only list of operations in topological order.
pub struct Tape<T: Real> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Vec<T>, shape: Vec<usize>, op: Op<T>, requires_grad: bool) -> Val {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            data,
            shape,
            grad: None,
            op,
            requires_grad,
        });
        Val(self.nodes.len() - 1)
    }

    fn requires(&self, v: Val) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Tracked leaf: receives gradient on backward.
    pub fn leaf(&mut self, data: Vec<T>, shape: Vec<usize>) -> Result<Val> {
        Self::check_numel("leaf", &data, &shape)?;
        Ok(self.push(data, shape, Op::Leaf { tracked: true }, true))
    }

    /// Untracked leaf: never receives gradient.
    pub fn constant(&mut self, data: Vec<T>, shape: Vec<usize>) -> Result<Val> {
        Self::check_numel("constant", &data, &shape)?;
        Ok(self.push(data, shape, Op::Leaf { tracked: false }, false))
    }

    pub fn scalar(&mut self, x: T) -> Val {
        self.push(vec![x], vec![1], Op::Leaf { tracked: false }, false)
    }

    /// Copies the value of `v` into a fresh untracked leaf.
    pub fn detach(&mut self, v: Val) -> Val {
        let data = self.nodes[v.0].data.clone();
        let shape = self.nodes[v.0].shape.clone();
        self.push(data, shape, Op::Leaf { tracked: false }, false)
    }

    fn check_numel(op: &'static str, data: &[T], shape: &[usize]) -> Result<()> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::Shape {
                op,
                lhs: vec![data.len()],
                rhs: shape.to_vec(),
            });
        }
        Ok(())
    }

    pub fn data(&self, v: Val) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Val) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Value of a single-element tensor.
    pub fn value(&self, v: Val) -> T {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    /// Accumulated gradient of a tracked leaf; `None` for anything else
    /// or before the first backward call.
    pub fn grad(&self, v: Val) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = &mut node.grad {
                g.iter_mut().for_each(|x| *x = T::zero());
            }
        }
    }

    /// Reverse pass from a scalar loss. Gradients of tracked leaves
    /// accumulate additively across repeated calls.
    pub fn backward(&mut self, loss: Val) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let n = loss.0 + 1;
        let mut seed: Vec<Option<Vec<T>>> = Vec::with_capacity(n);
        seed.resize_with(n, || None);
        seed[loss.0] = Some(vec![T::one()]);
        for i in (0..n).rev() {
            let Some(g) = seed[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf { tracked } = self.nodes[i].op {
                if tracked {
                    let node = &mut self.nodes[i];
                    let acc = node.grad.get_or_insert_with(|| vec![T::zero(); g.len()]);
                    for (a, gv) in acc.iter_mut().zip(&g) {
                        *a += *gv;
                    }
                }
                continue;
            }
            self.propagate(i, &g, &mut seed);
        }
        Ok(())
    }
}
