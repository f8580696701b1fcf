//! Elementwise ops, scalar reductions and broadcasting binaries.

use alloc::format;
use alloc::vec::Vec;


use super::shape::{broadcast_index, broadcast_shape};
use super::tape::{Grads, Op, Tape, Var};
use crate::{Error, Result, Scalar};

#[inline]
fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

impl<S: Scalar> Tape<S> {
    fn binary(&mut self, name: &'static str, a: Var, b: Var, op: Op<S>, f: impl Fn(S, S) -> S) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (va, vb) = (self.value(a), self.value(b));
        let value: Vec<S>;
        let out_shape;
        if sa == sb {
            value = va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect();
            out_shape = sa;
        } else {
            out_shape = broadcast_shape(&sa, &sb)
                .ok_or_else(|| Error::dim(name, format!("cannot broadcast {sa:?} with {sb:?}")))?;
            let ia = broadcast_index(&out_shape, &sa);
            let ib = broadcast_index(&out_shape, &sb);
            value = ia.iter().zip(&ib).map(|(&i, &j)| f(va[i], vb[j])).collect();
        }
        self.push(name, out_shape, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn max_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("max_elem", a, b, Op::MaxElem(a, b), |x, y| if x >= y { x } else { y })
    }

    fn unary(&mut self, name: &'static str, x: Var, op: Op<S>, f: impl Fn(S) -> S) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        self.push(name, shape, value, op, &[x])
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        self.unary("scale", x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: S) -> Result<Var> {
        self.unary("add_scalar", x, Op::AddScalar(x), |v| v + c)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, Op::Exp(x), |v| v.exp())
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary("ln", x, Op::Ln(x), |v| v.ln())
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, Op::Sigmoid(x), sigmoid)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary("silu", x, Op::Silu(x), |v| v * sigmoid(v))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: S) -> Result<Var> {
        self.unary("leaky_relu", x, Op::LeakyRelu(x, slope), |v| {
            if v > S::zero() {
                v
            } else {
                v * slope
            }
        })
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, Op::Abs(x), |v| v.abs())
    }

    pub fn clamp_min(&mut self, x: Var, c: S) -> Result<Var> {
        self.unary("clamp_min", x, Op::ClampMin(x, c), |v| if v >= c { v } else { c })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().sum();
        self.push("sum", alloc::vec![1], alloc::vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s: S = v.iter().copied().sum::<S>() / S::lit(v.len() as f64);
        self.push("mean", alloc::vec![1], alloc::vec![s], Op::Mean(x), &[x])
    }
}

pub(super) fn backward_unary<S: Scalar>(ctx: &mut Grads<'_, S>, op: &Op<S>, x: Var, y: &[S], g: &[S]) {
    let xv = ctx.value(x);
    let gx: Vec<S> = match op {
        Op::Exp(_) => g.iter().zip(y).map(|(&g, &y)| g * y).collect(),
        Op::Ln(_) => g.iter().zip(xv).map(|(&g, &x)| g / x).collect(),
        Op::Sigmoid(_) => g
            .iter()
            .zip(y)
            .map(|(&g, &y)| g * y * (S::one() - y))
            .collect(),
        Op::Silu(_) => g
            .iter()
            .zip(xv)
            .map(|(&g, &x)| {
                let s = sigmoid(x);
                g * s * (S::one() + x * (S::one() - s))
            })
            .collect(),
        Op::LeakyRelu(_, slope) => g
            .iter()
            .zip(xv)
            .map(|(&g, &x)| if x > S::zero() { g } else { g * *slope })
            .collect(),
        Op::Abs(_) => g
            .iter()
            .zip(xv)
            .map(|(&g, &x)| {
                if x > S::zero() {
                    g
                } else if x < S::zero() {
                    -g
                } else {
                    S::zero()
                }
            })
            .collect(),
        Op::ClampMin(_, c) => g
            .iter()
            .zip(xv)
            .map(|(&g, &x)| if x >= *c { g } else { S::zero() })
            .collect(),
        _ => unreachable!("not a unary op"),
    };
    ctx.add(x, &gx);
}

pub(super) fn backward_binary<S: Scalar>(
    ctx: &mut Grads<'_, S>,
    op: &Op<S>,
    a: Var,
    b: Var,
    out_shape: &[usize],
    g: &[S],
) {
    let (va, vb) = (ctx.value(a), ctx.value(b));
    let (sa, sb) = (ctx.shape(a), ctx.shape(b));
    let same = sa == out_shape && sb == out_shape;
    let (ia, ib) = if same {
        (None, None)
    } else {
        (Some(broadcast_index(out_shape, sa)), Some(broadcast_index(out_shape, sb)))
    };
    let ai = |i: usize| ia.as_ref().map_or(i, |m| m[i]);
    let bi = |i: usize| ib.as_ref().map_or(i, |m| m[i]);

    let mut ga: Vec<S> = alloc::vec![S::zero(); va.len()];
    let mut gb: Vec<S> = alloc::vec![S::zero(); vb.len()];
    for (i, &gi) in g.iter().enumerate() {
        let (j, k) = (ai(i), bi(i));
        let (x, y) = (va[j], vb[k]);
        let (da, db) = match op {
            Op::Add(..) => (gi, gi),
            Op::Sub(..) => (gi, -gi),
            Op::Mul(..) => (gi * y, gi * x),
            Op::Div(..) => (gi / y, -gi * x / (y * y)),
            Op::MaxElem(..) => {
                if x >= y {
                    (gi, S::zero())
                } else {
                    (S::zero(), gi)
                }
            }
            _ => unreachable!("not a binary op"),
        };
        ga[j] += da;
        gb[k] += db;
    }
    ctx.add(a, &ga);
    ctx.add(b, &gb);
}
