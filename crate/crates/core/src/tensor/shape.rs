use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn offset(shape: &[usize], index: &[usize]) -> usize {
    assert_eq!(shape.len(), index.len(), "index rank mismatch");
    let mut off = 0;
    for (&d, &i) in shape.iter().zip(index) {
        assert!(i < d, "index {index:?} out of bounds for {shape:?}");
        off = off * d + i;
    }
    off
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim(op, format!("axis {axis} out of range for {shape:?}")));
    }
    Ok((
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    ))
}

/// Numpy-style broadcast of two shapes (right-aligned, size-1 dims stretch).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every linear index of `out`, the linear index into an input of
/// shape `input` broadcast to `out`.
pub(crate) fn broadcast_index(out: &[usize], input: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let pad = rank - input.len();
    let in_strides = strides(input);
    let mut eff = vec![0usize; rank];
    for i in 0..input.len() {
        if input[i] != 1 {
            eff[pad + i] = in_strides[i];
        }
    }
    let total = numel(out);
    let mut idx = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        idx.push(off);
        for d in (0..rank).rev() {
            counter[d] += 1;
            off += eff[d];
            if counter[d] < out[d] {
                break;
            }
            off -= eff[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}

pub(crate) fn permute_shape(shape: &[usize], perm: &[usize]) -> Result<Vec<usize>> {
    let mut seen = vec![false; shape.len()];
    if perm.len() != shape.len() {
        return Err(Error::dim("permute", format!("perm {perm:?} for shape {shape:?}")));
    }
    for &p in perm {
        if p >= shape.len() || seen[p] {
            return Err(Error::dim("permute", format!("invalid perm {perm:?}")));
        }
        seen[p] = true;
    }
    Ok(perm.iter().map(|&p| shape[p]).collect())
}

/// Source linear index for every destination index of a permutation copy.
pub(crate) fn permute_index(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides = strides(shape);
    let perm_strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let rank = shape.len();
    let total = numel(shape);
    let mut idx = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        idx.push(off);
        for d in (0..rank).rev() {
            counter[d] += 1;
            off += perm_strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            off -= perm_strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
        assert_eq!(broadcast_index(&[2, 3], &[3]), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(broadcast_index(&[2, 3], &[2, 1]), vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn permute_transposes() {
        // 2x3 -> 3x2
        assert_eq!(permute_index(&[2, 3], &[1, 0]), vec![0, 3, 1, 4, 2, 5]);
    }
}
