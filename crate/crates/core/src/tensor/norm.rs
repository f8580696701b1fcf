//! Softmax family and the mean/variance normalizations.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;


use super::shape::{numel, split_axis};
use super::tape::{Grads, Op, Tape, Var};
use crate::{Error, Result, Scalar};

/// Visits each 1-D lane along the split axis as a list of linear offsets.
fn for_each_lane(outer: usize, len: usize, inner: usize, mut f: impl FnMut(&mut dyn Iterator<Item = usize>)) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut it = (0..len).map(move |l| base + l * inner);
            f(&mut it);
        }
    }
}

impl<S: Scalar> Tape<S> {
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis("softmax", &shape, axis)?;
        let v = self.value(x);
        let mut out = vec![S::zero(); v.len()];
        for_each_lane(outer, len, inner, |lane| {
            let idx: Vec<usize> = lane.collect();
            let mx = idx.iter().map(|&j| v[j]).fold(S::neg_infinity(), S::max);
            let mut z = S::zero();
            for &j in &idx {
                let e = (v[j] - mx).exp();
                out[j] = e;
                z += e;
            }
            for &j in &idx {
                out[j] /= z;
            }
        });
        self.push("softmax", shape, out, Op::Softmax(x, axis), &[x])
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis("log_softmax", &shape, axis)?;
        let v = self.value(x);
        let mut out = vec![S::zero(); v.len()];
        for_each_lane(outer, len, inner, |lane| {
            let idx: Vec<usize> = lane.collect();
            let mx = idx.iter().map(|&j| v[j]).fold(S::neg_infinity(), S::max);
            let z: S = idx.iter().map(|&j| (v[j] - mx).exp()).sum();
            let lz = mx + z.ln();
            for &j in &idx {
                out[j] = v[j] - lz;
            }
        });
        self.push("log_softmax", shape, out, Op::LogSoftmax(x, axis), &[x])
    }

    /// Zero-mean, unit-variance normalization along `axis` (no affine terms).
    pub fn layer_norm(&mut self, x: Var, axis: usize, eps: S) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis("layer_norm", &shape, axis)?;
        self.normalize("layer_norm", x, (outer, len, inner), eps)
    }

    /// Per-sample, per-channel normalization of a `[B, C, spatial...]` map.
    pub fn instance_norm(&mut self, x: Var, eps: S) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 3 {
            return Err(Error::dim(
                "instance_norm",
                format!("expected [B, C, spatial...], got {shape:?}"),
            ));
        }
        let outer = shape[0] * shape[1];
        self.normalize("instance_norm", x, (outer, numel(&shape[2..]), 1), eps)
    }

    fn normalize(&mut self, name: &'static str, x: Var, split: (usize, usize, usize), eps: S) -> Result<Var> {
        if !(eps > S::zero()) {
            return Err(Error::Parameter(format!("{name}: eps must be positive, got {eps}")));
        }
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split;
        let v = self.value(x);
        let mut out = vec![S::zero(); v.len()];
        let mut rstd = Vec::with_capacity(outer * inner);
        let n = S::lit(len as f64);
        for_each_lane(outer, len, inner, |lane| {
            let idx: Vec<usize> = lane.collect();
            let mean = idx.iter().map(|&j| v[j]).sum::<S>() / n;
            let var = idx
                .iter()
                .map(|&j| {
                    let d = v[j] - mean;
                    d * d
                })
                .sum::<S>()
                / n;
            let r = S::one() / (var + eps).sqrt();
            for &j in &idx {
                out[j] = (v[j] - mean) * r;
            }
            rstd.push(r);
        });
        self.push(
            name,
            shape,
            out,
            Op::Norm {
                x,
                outer,
                len,
                inner,
                rstd,
            },
            &[x],
        )
    }
}

pub(super) fn backward_softmax<S: Scalar>(ctx: &mut Grads<'_, S>, x: Var, axis: usize, y: &[S], g: &[S]) {
    let (outer, len, inner) = split_axis("softmax", ctx.shape(x), axis).expect("checked in forward");
    let Some(gx) = ctx.buf(x) else { return };
    for_each_lane(outer, len, inner, |lane| {
        let idx: Vec<usize> = lane.collect();
        let dot: S = idx.iter().map(|&j| g[j] * y[j]).sum();
        for &j in &idx {
            gx[j] += y[j] * (g[j] - dot);
        }
    });
}

pub(super) fn backward_log_softmax<S: Scalar>(ctx: &mut Grads<'_, S>, x: Var, axis: usize, y: &[S], g: &[S]) {
    let (outer, len, inner) = split_axis("log_softmax", ctx.shape(x), axis).expect("checked in forward");
    let Some(gx) = ctx.buf(x) else { return };
    for_each_lane(outer, len, inner, |lane| {
        let idx: Vec<usize> = lane.collect();
        let gs: S = idx.iter().map(|&j| g[j]).sum();
        for &j in &idx {
            gx[j] += g[j] - y[j].exp() * gs;
        }
    });
}

pub(super) fn backward_norm<S: Scalar>(
    ctx: &mut Grads<'_, S>,
    x: Var,
    split: (usize, usize, usize),
    rstd: &[S],
    y: &[S],
    g: &[S],
) {
    let (outer, len, inner) = split;
    let Some(gx) = ctx.buf(x) else { return };
    let n = S::lit(len as f64);
    let mut lane_no = 0;
    for_each_lane(outer, len, inner, |lane| {
        let idx: Vec<usize> = lane.collect();
        let r = rstd[lane_no];
        lane_no += 1;
        let sg: S = idx.iter().map(|&j| g[j]).sum();
        let sgy: S = idx.iter().map(|&j| g[j] * y[j]).sum();
        for &j in &idx {
            gx[j] += r / n * (n * g[j] - sg - y[j] * sgy);
        }
    });
}
