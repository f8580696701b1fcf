//! Matrix product, axis reductions and copy-based shape ops.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::shape::{numel, permute_index, permute_shape, split_axis};
use super::tape::{Grads, Op, Tape, Var};
use crate::{Error, Result, Scalar};

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

impl<S: Scalar> Tape<S> {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        gemm_acc(self.value(a), self.value(b), &mut out, m, k, n);
        self.push("matmul", vec![m, n], out, Op::Matmul(a, b), &[a, b])
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis("sum_axis", &shape, axis)?;
        let v = self.value(x);
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += v[base + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        self.push("sum_axis", out_shape, out, Op::SumAxis(x, axis), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let old = self.shape(x);
        if numel(shape) != numel(old) || shape.contains(&0) {
            return Err(Error::dim("reshape", format!("{old:?} -> {shape:?}")));
        }
        let v = self.value(x).to_vec();
        self.push("reshape", shape.to_vec(), v, Op::Reshape(x), &[x])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let out_shape = permute_shape(&shape, perm)?;
        let idx = permute_index(&shape, perm);
        let v = self.value(x);
        let out = idx.iter().map(|&i| v[i]).collect();
        self.push("permute", out_shape, out, Op::Permute(x, perm.to_vec()), &[x])
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    /// Reverses the order of elements along `axis`.
    pub fn flip(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis("flip", &shape, axis)?;
        let v = self.value(x);
        let out = flip_copy(v, outer, len, inner);
        self.push("flip", shape, out, Op::Flip(x, axis), &[x])
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, full, inner) = split_axis("narrow", &shape, axis)?;
        if len == 0 || start + len > full {
            return Err(Error::dim(
                "narrow",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push("narrow", out_shape, out, Op::Narrow { x, axis, start }, &[x])
    }
}

pub(crate) fn flip_copy<S: Copy>(v: &[S], outer: usize, len: usize, inner: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(v.len());
    for o in 0..outer {
        for l in (0..len).rev() {
            let base = (o * len + l) * inner;
            out.extend_from_slice(&v[base..base + inner]);
        }
    }
    out
}

pub(super) fn backward_matmul<S: Scalar>(ctx: &mut Grads<'_, S>, a: Var, b: Var, g: &[S]) {
    let (sa, sb) = (ctx.shape(a), ctx.shape(b));
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let (va, vb) = (ctx.value(a), ctx.value(b));
    if let Some(ga) = ctx.buf(a) {
        // dA = dC · Bᵀ
        for i in 0..m {
            for p in 0..k {
                let mut acc = S::zero();
                for j in 0..n {
                    acc += g[i * n + j] * vb[p * n + j];
                }
                ga[i * k + p] += acc;
            }
        }
    }
    if let Some(gb) = ctx.buf(b) {
        // dB = Aᵀ · dC
        for i in 0..m {
            for p in 0..k {
                let av = va[i * k + p];
                if av == S::zero() {
                    continue;
                }
                let row = &mut gb[p * n..(p + 1) * n];
                for (o, &gv) in row.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                    *o += av * gv;
                }
            }
        }
    }
}

pub(super) fn backward_sum_axis<S: Scalar>(ctx: &mut Grads<'_, S>, x: Var, axis: usize, g: &[S]) {
    let (outer, len, inner) = split_axis("sum_axis", ctx.shape(x), axis).expect("checked in forward");
    if let Some(gx) = ctx.buf(x) {
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    gx[base + i] += g[o * inner + i];
                }
            }
        }
    }
}

pub(super) fn backward_permute<S: Scalar>(ctx: &mut Grads<'_, S>, x: Var, perm: &[usize], g: &[S]) {
    let idx = permute_index(ctx.shape(x), perm);
    if let Some(gx) = ctx.buf(x) {
        for (dst, &src) in idx.iter().enumerate() {
            gx[src] += g[dst];
        }
    }
}

pub(super) fn backward_flip<S: Scalar>(ctx: &mut Grads<'_, S>, x: Var, axis: usize, g: &[S]) {
    let (outer, len, inner) = split_axis("flip", ctx.shape(x), axis).expect("checked in forward");
    let back = flip_copy(g, outer, len, inner);
    ctx.add(x, &back);
}

pub(super) fn backward_narrow<S: Scalar>(
    ctx: &mut Grads<'_, S>,
    x: Var,
    axis: usize,
    start: usize,
    out_shape: &[usize],
    g: &[S],
) {
    let (outer, full, inner) = split_axis("narrow", ctx.shape(x), axis).expect("checked in forward");
    let len = out_shape[axis];
    if let Some(gx) = ctx.buf(x) {
        for o in 0..outer {
            let dst = (o * full + start) * inner;
            let src = o * len * inner;
            for i in 0..len * inner {
                gx[dst + i] += g[src + i];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    #[test]
    fn identity_times_m_is_m() {
        let mut t = Tape::<f64>::new();
        let i = t.constant(&Tensor::eye(3));
        let m = Tensor::from_fn(&[3, 2], |k| k as f64 * 1.5 - 2.0);
        let mv = t.constant(&m);
        let out = t.matmul(i, mv).unwrap();
        assert_eq!(t.tensor(out), m);
    }

    #[test]
    fn hand_expanded_product() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(&Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = t.constant(&Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.shape(c), &[2, 1]);
        // 1+2, 3+4
        assert_eq!(t.value(c), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(&Tensor::zeros(&[2, 3]));
        let b = t.constant(&Tensor::zeros(&[2, 3]));
        let msg = alloc::format!("{}", t.matmul(a, b).unwrap_err());
        assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
    }

    #[test]
    fn narrow_and_flip() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(&Tensor::from_fn(&[2, 4], |i| i as f64));
        let n = t.narrow(x, 1, 1, 2).unwrap();
        assert_eq!(t.value(n), &[1.0, 2.0, 5.0, 6.0]);
        let f = t.flip(x, 1).unwrap();
        assert_eq!(t.value(f), &[3.0, 2.0, 1.0, 0.0, 7.0, 6.0, 5.0, 4.0]);
        assert!(t.narrow(x, 1, 3, 2).is_err());
    }
}
