//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every forward op appends a node holding its output value. Nodes are only
//! ever appended, so node order is a topological order and `backward` is a
//! single reverse sweep.

mod conv;
mod gradcheck;
mod norm;
mod ops;
mod upsample;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use gradcheck::{compare_with_central_differences, gradcheck, GradcheckReport};
pub use conv::conv_out_dim;
pub use norm::{BnMode, RunningStats};
pub use upsample::{bilinear_taps, resize_planes};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Op identity as it appears in a trace.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    Neg,
    Tanh,
    Relu,
    Sum,
    Conv2d { stride: usize },
    BatchNorm,
    Upsample2x,
    Concat,
    GlobalAvgPool,
    Linear,
    L1,
    SoftmaxCrossEntropy,
}

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Neg(Var),
    Tanh(Var),
    Relu(Var),
    Sum(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: norm::Saved<T>,
    },
    Upsample2x(Var),
    Concat(Var, Var),
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    L1(Var, Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Neg(..) => OpKind::Neg,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Relu(..) => OpKind::Relu,
            Op::Sum(..) => OpKind::Sum,
            Op::Conv2d { stride, .. } => OpKind::Conv2d { stride: *stride },
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Upsample2x(..) => OpKind::Upsample2x,
            Op::Concat(..) => OpKind::Concat,
            Op::GlobalAvgPool(..) => OpKind::GlobalAvgPool,
            Op::Linear { .. } => OpKind::Linear,
            Op::L1(..) => OpKind::L1,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Concat(a, b) | Op::L1(a, b) => {
                vec![a, b]
            }
            Op::Scale(a, _)
            | Op::Neg(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Sum(a)
            | Op::Upsample2x(a)
            | Op::GlobalAvgPool(a) => vec![a],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![x, w];
                v.extend(b);
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Linear { x, w, b } => vec![x, w, b],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![logits],
        }
    }
}

pub(crate) struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
    scope: Arc<str>,
    tag: Option<usize>,
}

/// One recorded op, for inspecting what a forward pass executed.
#[derive(Clone, Debug)]
pub struct TraceEntry {
    pub scope: Arc<str>,
    pub kind: OpKind,
    pub input_shapes: Vec<Vec<usize>>,
    pub output_shape: Vec<usize>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    scopes: Vec<String>,
    scope: Arc<str>,
    grad_enabled: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            scopes: Vec::new(),
            scope: Arc::from(""),
            grad_enabled: true,
        }
    }

    /// A tape that never tracks gradients. Forward values and the trace are
    /// still recorded.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn push_scope(&mut self, name: &str) {
        self.scopes.push(name.to_owned());
        self.scope = Arc::from(self.scopes.join("/"));
    }

    pub fn pop_scope(&mut self) {
        self.scopes.pop();
        self.scope = Arc::from(self.scopes.join("/"));
    }

    /// Runs `f` with `name` pushed on the scope stack.
    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.push_scope(name);
        let out = f(self);
        self.pop_scope();
        out
    }

    /// A leaf input. `requires_grad` is ignored on an inference tape.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_leaf(value, requires_grad, None)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false, None)
    }

    /// A leaf whose gradient can later be collected by `tag` through
    /// [`Tape::tagged_grads`].
    pub fn tagged_leaf(&mut self, value: Tensor<T>, requires_grad: bool, tag: usize) -> Var {
        self.push_leaf(value, requires_grad, Some(tag))
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool, tag: Option<usize>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: requires_grad && self.grad_enabled,
            op: Op::Leaf,
            scope: self.scope.clone(),
            tag,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let inputs = op.inputs();
        if cfg!(debug_assertions) && !value.is_finite() {
            let inputs_finite = inputs.iter().all(|&v| self.nodes[v.0].value.is_finite());
            assert!(!inputs_finite, "{:?} produced a non-finite value from finite inputs", op.kind());
        }
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
            scope: self.scope.clone(),
            tag: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`: zeros if `v` tracks gradients but the
    /// loss did not depend on it, `None` if it does not track gradients.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let shape = node.value.shape().to_vec();
        Some(match &node.grad {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad shape"),
            None => Tensor::zeros(shape),
        })
    }

    /// Gradients of tagged leaves that received one.
    pub fn tagged_grads(&self) -> impl Iterator<Item = (usize, &[T])> + '_ {
        self.nodes.iter().filter_map(|n| match (n.tag, &n.grad) {
            (Some(tag), Some(g)) if n.requires_grad => Some((tag, g.as_slice())),
            _ => None,
        })
    }

    pub fn trace(&self) -> Vec<TraceEntry> {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .map(|n| TraceEntry {
                scope: n.scope.clone(),
                kind: n.op.kind(),
                input_shapes: n
                    .op
                    .inputs()
                    .iter()
                    .map(|v| self.nodes[v.0].value.shape().to_vec())
                    .collect(),
                output_shape: n.value.shape().to_vec(),
            })
            .collect()
    }

    /// Which side of each non-differentiable point (relu at 0, |.| at 0)
    /// the forward pass landed on. Two evaluations with equal signatures
    /// lie on the same smooth piece of the graph.
    pub fn kink_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::Relu(x) => sig.extend(self.nodes[x.0].value.data().iter().map(|v| *v > T::zero())),
                Op::L1(a, b) => {
                    let (a, b) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                    sig.extend(a.iter().zip(b).map(|(x, y)| x > y));
                    sig.extend(a.iter().zip(b).map(|(x, y)| x < y));
                }
                _ => {}
            }
        }
        sig
    }

    /// Populates gradients of everything `loss` depends on. Gradients
    /// accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.nodes[loss.0].value.shape();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NotScalar(shape.to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        accumulate(&mut self.nodes, loss, vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &tail[0];
            let Some(grad) = node.grad.as_deref() else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            backward_op(&node.op, &node.value, grad, head);
        }
        Ok(())
    }
}

pub(crate) fn accumulate<T: Real>(nodes: &mut [Node<T>], v: Var, contribution: Vec<T>) {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return;
    }
    match &mut node.grad {
        Some(g) => g.iter_mut().zip(&contribution).for_each(|(g, c)| *g = *g + *c),
        None => node.grad = Some(contribution),
    }
}

fn wants<T>(nodes: &[Node<T>], v: Var) -> bool {
    nodes[v.0].requires_grad
}

fn backward_op<T: Real>(op: &Op<T>, out: &Tensor<T>, g: &[T], nodes: &mut [Node<T>]) {
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if wants(nodes, v) {
                    accumulate(nodes, v, g.to_vec());
                }
            }
        }
        Op::Sub(a, b) => {
            if wants(nodes, *a) {
                accumulate(nodes, *a, g.to_vec());
            }
            if wants(nodes, *b) {
                accumulate(nodes, *b, g.iter().map(|&v| -v).collect());
            }
        }
        Op::Mul(a, b) => {
            if wants(nodes, *a) {
                let bv = nodes[b.0].value.data();
                let d = g.iter().zip(bv).map(|(&g, &y)| g * y).collect();
                accumulate(nodes, *a, d);
            }
            if wants(nodes, *b) {
                let av = nodes[a.0].value.data();
                let d = g.iter().zip(av).map(|(&g, &x)| g * x).collect();
                accumulate(nodes, *b, d);
            }
        }
        Op::Scale(a, s) => accumulate(nodes, *a, g.iter().map(|&v| v * *s).collect()),
        Op::Neg(a) => accumulate(nodes, *a, g.iter().map(|&v| -v).collect()),
        Op::Tanh(a) => {
            let d = g
                .iter()
                .zip(out.data())
                .map(|(&g, &y)| g * (T::one() - y * y))
                .collect();
            accumulate(nodes, *a, d);
        }
        Op::Relu(a) => {
            let x = nodes[a.0].value.data();
            let d = g
                .iter()
                .zip(x)
                .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                .collect();
            accumulate(nodes, *a, d);
        }
        Op::Sum(a) => {
            let n = nodes[a.0].value.numel();
            accumulate(nodes, *a, vec![g[0]; n]);
        }
        Op::Conv2d { x, w, b, stride, pad } => conv::backward(nodes, g, *x, *w, *b, *stride, *pad),
        Op::BatchNorm {
            x,
            gamma,
            beta,
            saved,
        } => norm::backward(nodes, g, *x, *gamma, *beta, saved),
        Op::Upsample2x(x) => upsample::backward(nodes, g, *x),
        Op::Concat(a, b) => ops::concat_backward(nodes, g, *a, *b),
        Op::GlobalAvgPool(x) => ops::gap_backward(nodes, g, *x),
        Op::Linear { x, w, b } => ops::linear_backward(nodes, g, *x, *w, *b),
        Op::L1(a, b) => ops::l1_backward(nodes, g[0], *a, *b),
        Op::SoftmaxCrossEntropy {
            logits,
            labels,
            weights,
            probs,
        } => ops::softmax_ce_backward(nodes, g[0], *logits, labels, weights, probs),
    }
}
