//! 2-D convolution, its transpose, and the depthwise causal 1-D convolution
//! used on token sequences.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::tape::{Grads, Op, Tape, Var};
use crate::{Error, Result, Scalar};

fn dims4(op: &'static str, s: &[usize]) -> Result<[usize; 4]> {
    match *s {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::dim(op, format!("expected rank-4 tensor, got {s:?}"))),
    }
}

impl<S: Scalar> Tape<S> {
    /// `x[B,C,H,W] ⋆ w[O,C,kh,kw] + b[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let [bs, c, h, wd] = dims4("conv2d", self.shape(x))?;
        let [o, wc, kh, kw] = dims4("conv2d", self.shape(w))?;
        if wc != c {
            return Err(Error::dim(
                "conv2d",
                format!("input {:?} vs weight {:?}", self.shape(x), self.shape(w)),
            ));
        }
        if stride == 0 {
            return Err(Error::Parameter("conv2d: stride must be >= 1".into()));
        }
        if kh > h + 2 * padding || kw > wd + 2 * padding {
            return Err(Error::dim(
                "conv2d",
                format!(
                    "kernel {kh}x{kw} larger than padded input {}x{}",
                    h + 2 * padding,
                    wd + 2 * padding
                ),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::dim("conv2d", format!("bias {:?} for {o} outputs", self.shape(b))));
            }
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (wd + 2 * padding - kw) / stride + 1;
        let (xv, wv) = (self.value(x), self.value(w));
        let mut out = vec![S::zero(); bs * o * oh * ow];
        for n in 0..bs {
            for oc in 0..o {
                let plane = &mut out[(n * o + oc) * oh * ow..(n * o + oc + 1) * oh * ow];
                if let Some(b) = b {
                    let bv = self.value(b)[oc];
                    plane.iter_mut().for_each(|v| *v = bv);
                }
                for ic in 0..c {
                    let xin = &xv[(n * c + ic) * h * wd..(n * c + ic + 1) * h * wd];
                    for i in 0..kh {
                        for j in 0..kw {
                            let wt = wv[((oc * c + ic) * kh + i) * kw + j];
                            for y in 0..oh {
                                let iy = (y * stride + i) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let row = &xin[iy as usize * wd..(iy as usize + 1) * wd];
                                let orow = &mut plane[y * ow..(y + 1) * ow];
                                for (xo, ov) in orow.iter_mut().enumerate() {
                                    let ix = (xo * stride + j) as isize - padding as isize;
                                    if ix >= 0 && ix < wd as isize {
                                        *ov += wt * row[ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            "conv2d",
            vec![bs, o, oh, ow],
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            },
            &inputs,
        )
    }

    /// Transposed convolution, `x[B,Ci,H,W]`, `w[Ci,Co,kh,kw]`, no padding.
    ///
    /// Output extents are `(H-1)*stride + kh`; with `kh == stride` this is
    /// `H*stride`. The forward map is the adjoint of [`Tape::conv2d`] with the
    /// same weight tensor.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let [bs, ci, h, wd] = dims4("conv_transpose2d", self.shape(x))?;
        let [wci, co, kh, kw] = dims4("conv_transpose2d", self.shape(w))?;
        if wci != ci {
            return Err(Error::dim(
                "conv_transpose2d",
                format!("input {:?} vs weight {:?}", self.shape(x), self.shape(w)),
            ));
        }
        if stride == 0 {
            return Err(Error::Parameter("conv_transpose2d: stride must be >= 1".into()));
        }
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(Error::dim(
                    "conv_transpose2d",
                    format!("bias {:?} for {co} outputs", self.shape(b)),
                ));
            }
        }
        let oh = (h - 1) * stride + kh;
        let ow = (wd - 1) * stride + kw;
        let (xv, wv) = (self.value(x), self.value(w));
        let mut out = vec![S::zero(); bs * co * oh * ow];
        for n in 0..bs {
            for oc in 0..co {
                let plane = &mut out[(n * co + oc) * oh * ow..(n * co + oc + 1) * oh * ow];
                if let Some(b) = b {
                    let bv = self.value(b)[oc];
                    plane.iter_mut().for_each(|v| *v = bv);
                }
                for ic in 0..ci {
                    let xin = &xv[(n * ci + ic) * h * wd..(n * ci + ic + 1) * h * wd];
                    for i in 0..kh {
                        for j in 0..kw {
                            let wt = wv[((ic * co + oc) * kh + i) * kw + j];
                            for y in 0..h {
                                let orow = y * stride + i;
                                for xx in 0..wd {
                                    plane[orow * ow + xx * stride + j] += wt * xin[y * wd + xx];
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            "conv_transpose2d",
            vec![bs, co, oh, ow],
            out,
            Op::ConvT2d { x, w, b, stride },
            &inputs,
        )
    }

    /// Depthwise causal convolution over the token axis of `x[B,T,C]`.
    ///
    /// `y[b,t,c] = bias[c] + Σ_j w[c,j] · x[b, t-(K-1)+j, c]`, with positions
    /// before the first token treated as zero.
    pub fn causal_conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let [bs, t, c] = match *sx.as_slice() {
            [a, b, c] => [a, b, c],
            _ => return Err(Error::dim("causal_conv1d", format!("expected [B,T,C], got {sx:?}"))),
        };
        let sw = self.shape(w);
        if sw.len() != 2 || sw[0] != c || self.shape(b) != [c] {
            return Err(Error::dim(
                "causal_conv1d",
                format!("input {sx:?}, weight {sw:?}, bias {:?}", self.shape(b)),
            ));
        }
        let k = sw[1];
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let mut out = Vec::with_capacity(xv.len());
        for n in 0..bs {
            for tt in 0..t {
                for ch in 0..c {
                    let mut acc = bv[ch];
                    for j in 0..k {
                        let src = tt as isize - (k - 1) as isize + j as isize;
                        if src >= 0 {
                            acc += wv[ch * k + j] * xv[(n * t + src as usize) * c + ch];
                        }
                    }
                    out.push(acc);
                }
            }
        }
        self.push("causal_conv1d", sx, out, Op::CausalConv1d { x, w, b }, &[x, w, b])
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn backward_conv2d<S: Scalar>(
    ctx: &mut Grads<'_, S>,
    x: Var,
    w: Var,
    b: Option<Var>,
    stride: usize,
    padding: usize,
    out_shape: &[usize],
    g: &[S],
) {
    let [bs, c, h, wd] = dims4("conv2d", ctx.shape(x)).expect("checked in forward");
    let [o, _, kh, kw] = dims4("conv2d", ctx.shape(w)).expect("checked in forward");
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let (xv, wv) = (ctx.value(x), ctx.value(w));
    if let Some(b) = b {
        if let Some(gb) = ctx.buf(b) {
            for n in 0..bs {
                for oc in 0..o {
                    let plane = &g[(n * o + oc) * oh * ow..(n * o + oc + 1) * oh * ow];
                    gb[oc] += plane.iter().copied().sum::<S>();
                }
            }
        }
    }
    let taps = |n: usize, oc: usize, ic: usize, i: usize, j: usize, f: &mut dyn FnMut(usize, usize)| {
        let _ = (n, oc, ic);
        for y in 0..oh {
            let iy = (y * stride + i) as isize - padding as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            for xo in 0..ow {
                let ix = (xo * stride + j) as isize - padding as isize;
                if ix >= 0 && ix < wd as isize {
                    f(y * ow + xo, iy as usize * wd + ix as usize);
                }
            }
        }
    };
    if let Some(gw) = ctx.buf(w) {
        for n in 0..bs {
            for oc in 0..o {
                let gp = &g[(n * o + oc) * oh * ow..(n * o + oc + 1) * oh * ow];
                for ic in 0..c {
                    let xin = &xv[(n * c + ic) * h * wd..(n * c + ic + 1) * h * wd];
                    for i in 0..kh {
                        for j in 0..kw {
                            let mut acc = S::zero();
                            taps(n, oc, ic, i, j, &mut |go, xi| acc += gp[go] * xin[xi]);
                            gw[((oc * c + ic) * kh + i) * kw + j] += acc;
                        }
                    }
                }
            }
        }
    }
    if let Some(gx) = ctx.buf(x) {
        for n in 0..bs {
            for oc in 0..o {
                let gp = &g[(n * o + oc) * oh * ow..(n * o + oc + 1) * oh * ow];
                for ic in 0..c {
                    let gin = &mut gx[(n * c + ic) * h * wd..(n * c + ic + 1) * h * wd];
                    for i in 0..kh {
                        for j in 0..kw {
                            let wt = wv[((oc * c + ic) * kh + i) * kw + j];
                            taps(n, oc, ic, i, j, &mut |go, xi| gin[xi] += wt * gp[go]);
                        }
                    }
                }
            }
        }
    }
}

pub(super) fn backward_conv_t2d<S: Scalar>(
    ctx: &mut Grads<'_, S>,
    x: Var,
    w: Var,
    b: Option<Var>,
    stride: usize,
    out_shape: &[usize],
    g: &[S],
) {
    let [bs, ci, h, wd] = dims4("conv_transpose2d", ctx.shape(x)).expect("checked in forward");
    let [_, co, kh, kw] = dims4("conv_transpose2d", ctx.shape(w)).expect("checked in forward");
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let (xv, wv) = (ctx.value(x), ctx.value(w));
    if let Some(b) = b {
        if let Some(gb) = ctx.buf(b) {
            for n in 0..bs {
                for oc in 0..co {
                    let plane = &g[(n * co + oc) * oh * ow..(n * co + oc + 1) * oh * ow];
                    gb[oc] += plane.iter().copied().sum::<S>();
                }
            }
        }
    }
    if let Some(gw) = ctx.buf(w) {
        for n in 0..bs {
            for oc in 0..co {
                let gp = &g[(n * co + oc) * oh * ow..(n * co + oc + 1) * oh * ow];
                for ic in 0..ci {
                    let xin = &xv[(n * ci + ic) * h * wd..(n * ci + ic + 1) * h * wd];
                    for i in 0..kh {
                        for j in 0..kw {
                            let mut acc = S::zero();
                            for y in 0..h {
                                for xx in 0..wd {
                                    acc += xin[y * wd + xx] * gp[(y * stride + i) * ow + xx * stride + j];
                                }
                            }
                            gw[((ic * co + oc) * kh + i) * kw + j] += acc;
                        }
                    }
                }
            }
        }
    }
    if let Some(gx) = ctx.buf(x) {
        for n in 0..bs {
            for oc in 0..co {
                let gp = &g[(n * co + oc) * oh * ow..(n * co + oc + 1) * oh * ow];
                for ic in 0..ci {
                    let gin = &mut gx[(n * ci + ic) * h * wd..(n * ci + ic + 1) * h * wd];
                    for i in 0..kh {
                        for j in 0..kw {
                            let wt = wv[((ic * co + oc) * kh + i) * kw + j];
                            for y in 0..h {
                                for xx in 0..wd {
                                    gin[y * wd + xx] += wt * gp[(y * stride + i) * ow + xx * stride + j];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(super) fn backward_causal_conv1d<S: Scalar>(ctx: &mut Grads<'_, S>, x: Var, w: Var, b: Var, g: &[S]) {
    let sx = ctx.shape(x);
    let (bs, t, c) = (sx[0], sx[1], sx[2]);
    let k = ctx.shape(w)[1];
    let (xv, wv) = (ctx.value(x), ctx.value(w));
    if let Some(gb) = ctx.buf(b) {
        for (i, &gv) in g.iter().enumerate() {
            gb[i % c] += gv;
        }
    }
    let each = |f: &mut dyn FnMut(usize, usize, usize)| {
        for n in 0..bs {
            for tt in 0..t {
                for ch in 0..c {
                    for j in 0..k {
                        let src = tt as isize - (k - 1) as isize + j as isize;
                        if src >= 0 {
                            f((n * t + tt) * c + ch, (n * t + src as usize) * c + ch, ch * k + j);
                        }
                    }
                }
            }
        }
    };
    if let Some(gw) = ctx.buf(w) {
        each(&mut |o, xi, wi| gw[wi] += g[o] * xv[xi]);
    }
    if let Some(gx) = ctx.buf(x) {
        each(&mut |o, xi, wi| gx[xi] += g[o] * wv[wi]);
    }
}
