//! Reverse-mode differentiation over a closed catalog of tensor operations.
//!
//! A [`Tape`] evaluates every operation eagerly as it is recorded (the
//! forward pass) and keeps the records needed to replay them in reverse
//! ([`Tape::backward`]). Values are immutable once produced.

pub mod gradcheck;
pub mod kernels;
mod ops;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

pub use gradcheck::{grad_check, grad_check_op, sample_inputs, CATALOG};

use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    idx: usize,
    tape: u64,
}

/// Backward rule for an operation whose forward is computed outside the tape
/// (the splatting renderer). Given the input values, the recorded output and
/// the gradient of the output, returns one optional gradient per input.
pub trait CustomOp<T: Scalar>: Send + Sync {
    fn name(&self) -> &str;
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>>;
}

pub(crate) enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Softplus(Var),
    Tanh(Var),
    Abs(Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: T },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, stride: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    SumAll(Var),
    MeanAll(Var),
    SumAxis { x: Var, axis: usize },
    MaxAll { x: Var, argmax: usize },
    MaskMul { x: Var, mask: Tensor<T> },
    Gather { x: Var, axis: usize, indices: Vec<usize> },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

impl<T: Scalar> Op<T> {
    pub(crate) fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::Tanh(..) => "tanh",
            Op::Abs(..) => "abs",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul(..) => "batch_matmul",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::MaxAll { .. } => "max",
            Op::MaskMul { .. } => "mask_mul",
            Op::Gather { .. } => "gather",
            Op::Custom { op, .. } => op.name(),
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::BatchMatMul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::Tanh(a)
            | Op::Abs(a)
            | Op::Softmax(a)
            | Op::Reshape(a)
            | Op::SumAll(a)
            | Op::MeanAll(a) => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Conv2d { x, w, b, .. } | Op::ConvTranspose2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::Concat { inputs, .. } | Op::Custom { inputs, .. } => inputs.clone(),
            Op::Slice { x, .. }
            | Op::Permute { x, .. }
            | Op::SumAxis { x, .. }
            | Op::MaxAll { x, .. }
            | Op::MaskMul { x, .. }
            | Op::Gather { x, .. } => vec![*x],
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum LeafKind {
    Input,
    Param,
}

/// The computation record: an append-only list of evaluated operations plus
/// a registry of named inputs and trainable parameters.
pub struct Tape<T: Scalar> {
    id: u64,
    nodes: Vec<Node<T>>,
    named: BTreeMap<String, (Var, LeafKind)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), named: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::BackwardBeforeForward);
        }
        Ok(())
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf".into() });
        }
        let idx = self.nodes.len();
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Ok(Var { idx, tape: self.id })
    }

    /// A value that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push_leaf(value, false)
    }

    /// A named input; gradients are reported for it.
    pub fn input(&mut self, name: &str, value: Tensor<T>) -> Result<Var> {
        let v = self.push_leaf(value, true)?;
        self.named.insert(name.to_string(), (v, LeafKind::Input));
        Ok(v)
    }

    /// A named trainable parameter.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Result<Var> {
        let v = self.push_leaf(value, true)?;
        self.named.insert(name.to_string(), (v, LeafKind::Param));
        Ok(v)
    }

    pub fn lookup(&self, name: &str) -> Option<Var> {
        self.named.get(name).map(|(v, _)| *v)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.named.iter().filter(|(_, (_, k))| *k == LeafKind::Param).map(|(n, _)| n.as_str())
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        let inputs = op.inputs();
        for &i in &inputs {
            self.check(i)?;
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name().to_string() });
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.idx].requires_grad);
        let idx = self.nodes.len();
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var { idx, tape: self.id })
    }

    /// Records an externally evaluated operation with a custom backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Result<Var> {
        self.push(output, Op::Custom { inputs: inputs.to_vec(), op })
    }

    /// Back-propagates from a scalar output (seed 1) or from `seed` when given.
    pub fn backward(&self, output: Var, seed: Option<Tensor<T>>) -> Result<Gradients<T>> {
        self.check(output)?;
        let out_shape = self.nodes[output.idx].value.shape().to_vec();
        let seed = match seed {
            Some(s) => {
                if s.shape() != out_shape.as_slice() {
                    return Err(Error::Shape {
                        op: "backward",
                        detail: format!("seed {:?} vs output {:?}", s.shape(), out_shape),
                    });
                }
                s
            }
            None => {
                if self.nodes[output.idx].value.numel() != 1 {
                    return Err(Error::Shape {
                        op: "backward",
                        detail: format!("implicit seed needs a scalar output, got {out_shape:?}"),
                    });
                }
                Tensor::ones(&out_shape)
            }
        };
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.idx] = Some(seed);
        for i in (0..=output.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGrad { op: node.op.name().to_string() });
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            let contributions = ops::backward(self, &node.op, &node.value, &g)?;
            for (input, gi) in contributions {
                if !self.nodes[input.idx].requires_grad {
                    continue;
                }
                match &mut grads[input.idx] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        let named = self
            .named
            .iter()
            .map(|(name, (v, _))| {
                let g = grads[v.idx].take().unwrap_or_else(|| Tensor::zeros(self.nodes[v.idx].value.shape()));
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients { named })
    }
}

/// Gradients of every named input and parameter. Unused leaves get exact zeros.
#[derive(Debug)]
pub struct Gradients<T> {
    named: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.named.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.named.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<T>> {
        self.named
    }

    pub fn is_finite(&self) -> bool {
        self.named.values().all(Tensor::is_finite)
    }
}
