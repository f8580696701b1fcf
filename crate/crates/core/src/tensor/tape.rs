use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::mlstm::cell::CellTrace;
use crate::{Error, Result, Scalar};

use super::{conv, linalg, norm, pointwise, shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MaxElem(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    Exp(Var),
    Ln(Var),
    Sigmoid(Var),
    Silu(Var),
    LeakyRelu(Var, S),
    Abs(Var),
    ClampMin(Var, S),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Flip(Var, usize),
    Narrow { x: Var, axis: usize, start: usize },
    Matmul(Var, Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Norm {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
        rstd: Vec<S>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    },
    ConvT2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    },
    CausalConv1d { x: Var, w: Var, b: Var },
    Mlstm {
        q: Var,
        k: Var,
        v: Var,
        ig: Var,
        fg: Var,
        heads: usize,
        traces: Vec<CellTrace<S>>,
    },
}

pub(crate) struct Node<S> {
    pub shape: Vec<usize>,
    pub value: Vec<S>,
    pub op: Op<S>,
    pub requires_grad: bool,
}

/// Records differentiable operations in execution order.
///
/// Nodes are append-only, so every node's inputs precede it. Leaf gradients
/// accumulate across [`Tape::backward`] calls until [`Tape::zero_grads`].
pub struct Tape<S> {
    pub(crate) nodes: Vec<Node<S>>,
    leaf_grads: Vec<Option<Vec<S>>>,
    grad_enabled: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape on which no leaf tracks gradients; backward state is not kept.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers `t` as a leaf; it tracks gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<S>) -> Var {
        let rg = t.requires_grad() && self.grad_enabled;
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), rg)
    }

    pub fn constant(&mut self, t: &Tensor<S>) -> Var {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), false)
    }

    /// Leaf tracking gradients regardless of the tensor's own flag.
    pub fn param(&mut self, t: &Tensor<S>) -> Var {
        let rg = self.grad_enabled;
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), rg)
    }

    fn push_leaf(&mut self, shape: Vec<usize>, value: Vec<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<S> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> S {
        self.nodes[v.0].value[0]
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    pub(crate) fn any_grad(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub(crate) fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        value: Vec<S>,
        op: Op<S>,
        inputs: &[Var],
    ) -> Result<Var> {
        debug_assert_eq!(shape::numel(&shape), value.len());
        if !value.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = self.any_grad(inputs);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    /// Fingerprint of the branch taken at every piecewise op on the tape:
    /// the LeakyReLU / abs / clamp side of each element, the winner of each
    /// `max_elem`, and which term won each mLSTM readout denominator. Two
    /// evaluations with equal fingerprints lie on the same smooth piece.
    /// Ops recorded without gradient tracking are not visible.
    pub fn branch_signature(&self) -> u64 {
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |bit: bool| {
            h ^= bit as u64 + 1;
            h = h.wrapping_mul(PRIME);
        };
        for node in &self.nodes {
            match &node.op {
                Op::LeakyRelu(x, _) | Op::Abs(x) => {
                    for &v in &self.nodes[x.0].value {
                        mix(v > S::zero());
                    }
                }
                Op::ClampMin(x, c) => {
                    for &v in &self.nodes[x.0].value {
                        mix(v >= *c);
                    }
                }
                Op::MaxElem(a, b) => {
                    let ia = shape::broadcast_index(&node.shape, &self.nodes[a.0].shape);
                    let va = &self.nodes[a.0].value;
                    let vb = &self.nodes[b.0].value;
                    let ib = shape::broadcast_index(&node.shape, &self.nodes[b.0].shape);
                    for (&i, &j) in ia.iter().zip(&ib) {
                        mix(va[i] >= vb[j]);
                    }
                }
                Op::Mlstm { traces, .. } => {
                    for tr in traces {
                        tr.active_flags().for_each(&mut mix);
                    }
                }
                _ => {}
            }
        }
        h
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = &self.nodes[loss.0];
        if n.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                n.shape
            )));
        }
        if !n.requires_grad {
            return Ok(());
        }
        let mut work: Vec<Option<Vec<S>>> = (0..=loss.0).map(|_| None).collect();
        work[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = work[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let slot = self.leaf_grads[i].get_or_insert_with(|| vec![S::zero(); g.len()]);
                slot.iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
                continue;
            }
            let mut ctx = Grads {
                nodes: &self.nodes,
                work: &mut work,
            };
            backward_node(&mut ctx, node, &g);
        }
        Ok(())
    }
}

/// Gradient accumulator handed to backward rules.
pub(crate) struct Grads<'a, S> {
    pub nodes: &'a [Node<S>],
    pub work: &'a mut [Option<Vec<S>>],
}

impl<'a, S: Scalar> Grads<'a, S> {
    pub fn value(&self, v: Var) -> &'a [S] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &'a [usize] {
        &self.nodes[v.0].shape
    }

    /// Mutable gradient buffer of `v`, or `None` if `v` is not differentiable.
    pub fn buf(&mut self, v: Var) -> Option<&mut Vec<S>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.len();
        Some(self.work[v.0].get_or_insert_with(|| vec![S::zero(); len]))
    }

    pub fn add(&mut self, v: Var, g: &[S]) {
        if let Some(buf) = self.buf(v) {
            buf.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
        }
    }
}

fn backward_node<S: Scalar>(ctx: &mut Grads<'_, S>, node: &Node<S>, g: &[S]) {
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::MaxElem(a, b) => pointwise::backward_binary(ctx, &node.op, *a, *b, &node.shape, g),
        Op::Scale(x, c) => {
            let gx: Vec<S> = g.iter().map(|&v| v * *c).collect();
            ctx.add(*x, &gx);
        }
        Op::AddScalar(x) | Op::Reshape(x) => ctx.add(*x, g),
        Op::Exp(x)
        | Op::Ln(x)
        | Op::Sigmoid(x)
        | Op::Silu(x)
        | Op::LeakyRelu(x, _)
        | Op::Abs(x)
        | Op::ClampMin(x, _) => pointwise::backward_unary(ctx, &node.op, *x, y, g),
        Op::Sum(x) => {
            let n = ctx.value(*x).len();
            let gx = vec![g[0]; n];
            ctx.add(*x, &gx);
        }
        Op::Mean(x) => {
            let n = ctx.value(*x).len();
            let gx = vec![g[0] / S::lit(n as f64); n];
            ctx.add(*x, &gx);
        }
        Op::SumAxis(x, axis) => linalg::backward_sum_axis(ctx, *x, *axis, g),
        Op::Permute(x, perm) => linalg::backward_permute(ctx, *x, perm, g),
        Op::Flip(x, axis) => linalg::backward_flip(ctx, *x, *axis, g),
        Op::Narrow { x, axis, start } => {
            linalg::backward_narrow(ctx, *x, *axis, *start, &node.shape, g)
        }
        Op::Matmul(a, b) => linalg::backward_matmul(ctx, *a, *b, g),
        Op::Softmax(x, axis) => norm::backward_softmax(ctx, *x, *axis, y, g),
        Op::LogSoftmax(x, axis) => norm::backward_log_softmax(ctx, *x, *axis, y, g),
        Op::Norm {
            x,
            outer,
            len,
            inner,
            rstd,
        } => norm::backward_norm(ctx, *x, (*outer, *len, *inner), rstd, y, g),
        Op::Conv2d {
            x,
            w,
            b,
            stride,
            padding,
        } => conv::backward_conv2d(ctx, *x, *w, *b, *stride, *padding, &node.shape, g),
        Op::ConvT2d { x, w, b, stride } => {
            conv::backward_conv_t2d(ctx, *x, *w, *b, *stride, &node.shape, g)
        }
        Op::CausalConv1d { x, w, b } => conv::backward_causal_conv1d(ctx, *x, *w, *b, g),
        Op::Mlstm {
            q,
            k,
            v,
            ig,
            fg,
            heads,
            traces,
        } => crate::mlstm::cell::backward_tape(ctx, [*q, *k, *v, *ig, *fg], *heads, traces, g),
    }
}
