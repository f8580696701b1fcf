//! Surface distances via an exact separable Euclidean distance transform.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use super::Surface;
use crate::{Error, Result};

/// Squared-distance lower envelope along one line (Felzenszwalb and
/// Huttenlocher), with sample `q` at physical position `q * step`.
fn edt_line(f: &[f64], step: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    let x = |q: usize| q as f64 * step;
    for q in 0..n {
        if f[q] == f64::INFINITY {
            continue;
        }
        loop {
            let Some(&p) = v.last() else { break };
            let s = ((f[q] + x(q) * x(q)) - (f[p] + x(p) * x(p))) / (2.0 * (x(q) - x(p)));
            if s <= *z.last().expect("z tracks v") {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
        if v.is_empty() {
            v.push(q);
            z.push(f64::NEG_INFINITY);
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < x(q) {
            k += 1;
        }
        let d = x(q) - x(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Euclidean distance in mm from every voxel to the nearest point of `set`;
/// infinite everywhere when `set` is empty.
pub fn distance_to_set(set: &Surface, spacing: &[f64]) -> Vec<f64> {
    let shape = &set.shape;
    let total: usize = shape.iter().product();
    let mut d = vec![f64::INFINITY; total];
    for &i in &set.indices {
        d[i] = 0.0;
    }
    let mut stride = 1;
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for (axis, &n) in shape.iter().enumerate() {
        let mut line = vec![0.0; n];
        let mut out = vec![0.0; n];
        let outer = total / (n * stride);
        for o in 0..outer {
            for inner in 0..stride {
                let base = o * n * stride + inner;
                for q in 0..n {
                    line[q] = d[base + q * stride];
                }
                edt_line(&line, spacing[axis], &mut out, &mut v, &mut z);
                for q in 0..n {
                    d[base + q * stride] = out[q];
                }
            }
        }
        stride *= n;
    }
    d.iter_mut().for_each(|x| *x = Float::sqrt(*x));
    d
}

/// Distance from each point of `from` to the nearest point of `to`.
pub fn directed_distances(from: &Surface, to: &Surface, spacing: &[f64]) -> Vec<f64> {
    let dt = distance_to_set(to, spacing);
    from.indices.iter().map(|&i| dt[i]).collect()
}

/// Linear-interpolation percentile (`p` in `[0, 100]`) of unsorted values.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    assert!(n > 0, "percentile of an empty set");
    let rank = p / 100.0 * (n - 1) as f64;
    let lo = Float::floor(rank) as usize;
    let hi = (lo + 1).min(n - 1);
    let w = rank - lo as f64;
    if w == 0.0 {
        v[lo]
    } else {
        v[lo] + w * (v[hi] - v[lo])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Hausdorff {
    Distances { hd: f64, hd95: f64 },
    /// Exactly one of the two surfaces is empty.
    Undefined,
}

fn check_pair(op: &'static str, a: &Surface, b: &Surface, spacing: &[f64]) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::dim(op, format!("surface grids {:?} vs {:?}", a.shape, b.shape)));
    }
    if spacing.len() != a.shape.len() || spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Parameter(format!("{op}: bad spacing {spacing:?} for grid {:?}", a.shape)));
    }
    Ok(())
}

/// Symmetric Hausdorff distance and the max of the two directed 95th
/// percentiles.
pub fn hausdorff(pred: &Surface, reference: &Surface, spacing: &[f64]) -> Result<Hausdorff> {
    check_pair("hausdorff", pred, reference, spacing)?;
    match (pred.is_empty(), reference.is_empty()) {
        (true, true) => return Ok(Hausdorff::Distances { hd: 0.0, hd95: 0.0 }),
        (true, false) | (false, true) => return Ok(Hausdorff::Undefined),
        _ => {}
    }
    let ab = directed_distances(pred, reference, spacing);
    let ba = directed_distances(reference, pred, spacing);
    let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
    Ok(Hausdorff::Distances {
        hd: max(&ab).max(max(&ba)),
        hd95: percentile(&ab, 95.0).max(percentile(&ba, 95.0)),
    })
}

/// Fraction of both surfaces lying within `tau` mm of the other one.
pub fn nsd(pred: &Surface, reference: &Surface, spacing: &[f64], tau: f64) -> Result<f64> {
    check_pair("nsd", pred, reference, spacing)?;
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("nsd tolerance must be > 0, got {tau}")));
    }
    match (pred.is_empty(), reference.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let within = |v: Vec<f64>| v.into_iter().filter(|&d| d <= tau).count();
    let a = within(directed_distances(pred, reference, spacing));
    let b = within(directed_distances(reference, pred, spacing));
    Ok((a + b) as f64 / (pred.len() + reference.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::surface_extract;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn points(shape: &[usize], idx: &[usize]) -> Surface {
        Surface {
            shape: shape.to_vec(),
            indices: idx.to_vec(),
        }
    }

    fn brute(from: &Surface, to: &Surface, spacing: &[f64]) -> Vec<f64> {
        (0..from.len())
            .map(|i| {
                let a = from.coords(i);
                (0..to.len())
                    .map(|j| {
                        let b = to.coords(j);
                        a.iter().zip(&b).zip(spacing).map(|((&p, &q), &s)| ((p as f64 - q as f64) * s).powi(2)).sum::<f64>().sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn single_pairs() {
        // (x, y) = (0, 0) and (3, 4) on a 5×5 grid, axis 0 = x
        let a = points(&[5, 5], &[0]);
        let b = points(&[5, 5], &[3 + 4 * 5]);
        assert_eq!(hausdorff(&a, &b, &[1.0, 1.0]).unwrap(), Hausdorff::Distances { hd: 5.0, hd95: 5.0 });
        let c = points(&[5, 5], &[5]);
        assert_eq!(hausdorff(&a, &c, &[1.0, 2.0]).unwrap(), Hausdorff::Distances { hd: 2.0, hd95: 2.0 });
        assert_eq!(hausdorff(&a, &a, &[1.0, 1.0]).unwrap(), Hausdorff::Distances { hd: 0.0, hd95: 0.0 });
    }

    #[test]
    fn empty_conventions() {
        let e = points(&[4, 4], &[]);
        let a = points(&[4, 4], &[3]);
        assert_eq!(hausdorff(&e, &e, &[1.0, 1.0]).unwrap(), Hausdorff::Distances { hd: 0.0, hd95: 0.0 });
        assert_eq!(hausdorff(&e, &a, &[1.0, 1.0]).unwrap(), Hausdorff::Undefined);
        assert_eq!(nsd(&e, &e, &[1.0, 1.0], 1.0).unwrap(), 1.0);
        assert_eq!(nsd(&a, &e, &[1.0, 1.0], 1.0).unwrap(), 0.0);
        assert!(nsd(&a, &a, &[1.0, 1.0], 0.0).is_err());
    }

    #[test]
    fn nsd_examples() {
        let a = points(&[10, 1], &[0, 1]);
        assert_eq!(nsd(&a, &a, &[1.0, 1.0], 1.0).unwrap(), 1.0);
        let far = points(&[10, 1], &[8, 9]);
        assert_eq!(nsd(&a, &far, &[1.0, 1.0], 1.0).unwrap(), 0.0);
    }

    #[test]
    fn percentile_matches_linear_rule() {
        assert_eq!(percentile(&[3.0, 1.0, 2.0], 50.0), 2.0);
        assert!((percentile(&[0.0, 10.0], 95.0) - 9.5).abs() < 1e-12);
        let v: Vec<f64> = (0..21).map(|i| i as f64).collect();
        assert!((percentile(&v, 95.0) - 19.0).abs() < 1e-12);
    }

    #[test]
    fn transform_matches_brute_force_on_random_volumes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for spacing in [[1.0, 1.0, 1.0], [0.5, 1.0, 2.0], [1.3, 0.7, 2.9]] {
            let shape = [9, 7, 6];
            let n = 9 * 7 * 6;
            let ma: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
            let mb: Vec<bool> = (0..n).map(|_| rng.random_bool(0.1)).collect();
            let (a, b) = (surface_extract(&ma, &shape), surface_extract(&mb, &shape));
            let fast = directed_distances(&a, &b, &spacing);
            for (x, y) in fast.iter().zip(brute(&a, &b, &spacing)) {
                assert!((x - y).abs() < 1e-9, "{x} vs {y}");
            }
        }
    }

    proptest! {
        #[test]
        fn hausdorff_properties(seed in 0u64..500, pa in 0.05f64..0.6, pb in 0.05f64..0.6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = [8, 6];
            let ma: Vec<bool> = (0..48).map(|_| rng.random_bool(pa)).collect();
            let mb: Vec<bool> = (0..48).map(|_| rng.random_bool(pb)).collect();
            let (a, b) = (surface_extract(&ma, &shape), surface_extract(&mb, &shape));
            let sp = [1.0, 1.5];
            let h1 = hausdorff(&a, &b, &sp).unwrap();
            prop_assert_eq!(h1, hausdorff(&b, &a, &sp).unwrap());
            if let Hausdorff::Distances { hd, hd95 } = h1 {
                prop_assert!(hd95 <= hd);
            }
            let n1 = nsd(&a, &b, &sp, 1.0).unwrap();
            prop_assert_eq!(n1, nsd(&b, &a, &sp, 1.0).unwrap());
            prop_assert!((0.0..=1.0).contains(&n1));
        }
    }
}
