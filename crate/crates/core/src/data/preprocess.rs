use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use super::{Geometry, LabelMap, Sample, Volume};
use crate::{Error, Result};

pub const CLIP_LOW: f64 = -125.0;
pub const CLIP_HIGH: f64 = 275.0;

const MAX_EXTENT: usize = 1 << 16;

/// Clips to the soft-tissue window and maps it linearly onto `[0, 1]`.
pub fn clip_normalize(v: &Volume) -> Volume {
    let data = v
        .data
        .iter()
        .map(|&x| ((x as f64).clamp(CLIP_LOW, CLIP_HIGH) - CLIP_LOW) / (CLIP_HIGH - CLIP_LOW))
        .map(|x| x as f32)
        .collect();
    Volume {
        geometry: v.geometry.clone(),
        data,
    }
}

/// `max(1, round(n * s / t))` per axis.
pub fn respaced_extents(shape: &[usize], spacing: &[f64], target: &[f64]) -> Result<Vec<usize>> {
    if target.len() != shape.len() {
        return Err(Error::Resample(format!(
            "target spacing {target:?} does not match rank {}",
            shape.len()
        )));
    }
    if let Some(t) = target.iter().find(|&&t| !(t > 0.0 && t.is_finite())) {
        return Err(Error::Resample(format!("target spacing must be positive, got {t}")));
    }
    shape
        .iter()
        .zip(spacing)
        .zip(target)
        .map(|((&n, &s), &t)| {
            let e = Float::round(n as f64 * s / t);
            if !(e <= MAX_EXTENT as f64) {
                return Err(Error::Resample(format!(
                    "extent {n} at spacing {s} resampled to {t} gives {e} voxels"
                )));
            }
            Ok((e as usize).max(1))
        })
        .collect()
}

/// Source coordinate of output voxel `j` when voxel centers are aligned:
/// `(j + 0.5) * t / s - 0.5`, clamped to the source grid.
fn source_coord(j: usize, ratio: f64, n: usize) -> f64 {
    ((j as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n - 1) as f64)
}

/// Linear resampling of one axis of an axis-0-fastest grid.
fn resample_axis(data: &[f64], shape: &[usize], axis: usize, out_n: usize, ratio: f64) -> Vec<f64> {
    let n = shape[axis];
    let inner: usize = shape[..axis].iter().product();
    let outer: usize = shape[axis + 1..].iter().product();
    let taps: Vec<(usize, usize, f64)> = (0..out_n)
        .map(|j| {
            let x = source_coord(j, ratio, n);
            let lo = Float::floor(x) as usize;
            let hi = (lo + 1).min(n - 1);
            (lo, hi, x - lo as f64)
        })
        .collect();
    let mut out = vec![0.0; inner * out_n * outer];
    for o in 0..outer {
        for (j, &(lo, hi, w)) in taps.iter().enumerate() {
            let src_lo = &data[(o * n + lo) * inner..][..inner];
            let src_hi = &data[(o * n + hi) * inner..][..inner];
            let dst = &mut out[(o * out_n + j) * inner..][..inner];
            for ((d, &a), &b) in dst.iter_mut().zip(src_lo).zip(src_hi) {
                *d = if w == 0.0 { a } else { a + w * (b - a) };
            }
        }
    }
    out
}

fn respaced_geometry(g: &Geometry, target: &[f64]) -> Result<(Geometry, Vec<usize>)> {
    let extents = respaced_extents(&g.shape, &g.spacing, target)?;
    let geometry = Geometry {
        shape: extents.clone(),
        spacing: target.to_vec(),
        origin: g.origin.clone(),
        flipped: g.flipped.clone(),
    };
    Ok((geometry, extents))
}

/// Multilinear resampling to `target` spacing at aligned voxel centers.
pub fn respace(v: &Volume, target: &[f64]) -> Result<Volume> {
    let g = &v.geometry;
    let (geometry, extents) = respaced_geometry(g, target)?;
    let mut shape = g.shape.clone();
    let mut data: Vec<f64> = v.data.iter().map(|&x| x as f64).collect();
    for axis in 0..shape.len() {
        if extents[axis] == shape[axis] && target[axis] == g.spacing[axis] {
            continue;
        }
        let ratio = target[axis] / g.spacing[axis];
        data = resample_axis(&data, &shape, axis, extents[axis], ratio);
        shape[axis] = extents[axis];
    }
    Volume::new(geometry, data.into_iter().map(|x| x as f32).collect())
}

/// Nearest-neighbour resampling of a label grid.
pub fn respace_labels(l: &LabelMap, target: &[f64]) -> Result<LabelMap> {
    let g = &l.geometry;
    let (geometry, extents) = respaced_geometry(g, target)?;
    let idx: Vec<Vec<usize>> = extents
        .iter()
        .enumerate()
        .map(|(a, &m)| {
            let ratio = target[a] / g.spacing[a];
            (0..m)
                .map(|j| Float::floor(source_coord(j, ratio, g.shape[a]) + 0.5) as usize)
                .collect()
        })
        .collect();
    let total: usize = extents.iter().product();
    let mut data = Vec::with_capacity(total);
    let mut pos = vec![0usize; extents.len()];
    for _ in 0..total {
        let mut src = 0;
        let mut stride = 1;
        for a in 0..extents.len() {
            src += idx[a][pos[a]] * stride;
            stride *= g.shape[a];
        }
        data.push(l.data[src]);
        for a in 0..extents.len() {
            pos[a] += 1;
            if pos[a] < extents[a] {
                break;
            }
            pos[a] = 0;
        }
    }
    LabelMap::new(geometry, data, l.num_classes)
}

/// Clip → normalize → respace, applied to image and label together.
pub fn preprocess(sample: &Sample, target: &[f64]) -> Result<Sample> {
    let image = respace(&clip_normalize(&sample.image), target)?;
    let label = respace_labels(&sample.label, target)?;
    Sample::new(image, label, sample.case_id.clone(), sample.split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vol(shape: &[usize], spacing: &[f64], data: Vec<f32>) -> Volume {
        Volume::new(Geometry::new(shape, spacing).unwrap(), data).unwrap()
    }

    #[test]
    fn clip_window_maps_exactly() {
        let v = vol(&[5, 1], &[1.0, 1.0], vec![-200.0, -125.0, 75.0, 275.0, 400.0]);
        assert_eq!(clip_normalize(&v).data, vec![0.0, 0.0, 0.5, 1.0, 1.0]);
    }

    #[test]
    fn linear_ramp_upsampled() {
        let v = vol(&[4, 1], &[2.0, 1.0], vec![0.0, 1.0, 2.0, 3.0]);
        let r = respace(&v, &[1.0, 1.0]).unwrap();
        assert_eq!(r.shape(), &[8, 1]);
        assert_eq!(r.data, vec![0.0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3.0]);
        assert_eq!(r.spacing(), &[1.0, 1.0]);
    }

    #[test]
    fn identity_spacing_is_exact() {
        let v = vol(&[3, 2, 2], &[0.7, 1.3, 2.0], (0..12).map(|i| i as f32 * 1.37 - 4.0).collect());
        let r = respace(&v, &[0.7, 1.3, 2.0]).unwrap();
        assert_eq!(r, v);
    }

    #[test]
    fn extents_clamp_to_one_and_reject_bad_targets() {
        assert_eq!(respaced_extents(&[3, 4], &[1.0, 1.0], &[10.0, 1.0]).unwrap(), vec![1, 4]);
        assert!(matches!(respaced_extents(&[3, 4], &[1.0, 1.0], &[0.0, 1.0]), Err(Error::Resample(_))));
        assert!(matches!(respaced_extents(&[3, 4], &[1.0, 1.0], &[1e-9, 1.0]), Err(Error::Resample(_))));
    }

    #[test]
    fn labels_stay_in_range() {
        let g = Geometry::new(&[4, 4], &[1.0, 1.0]).unwrap();
        let l = LabelMap::new(g, (0..16).map(|i| (i % 3) as u8).collect(), 3).unwrap();
        let r = respace_labels(&l, &[0.3, 1.7]).unwrap();
        assert!(r.data.iter().all(|&v| v < 3));
        assert_eq!(r.shape(), &[13, 2]);
    }

    proptest! {
        #[test]
        fn clip_normalize_lands_in_unit_interval(xs in proptest::collection::vec(-3000f32..3000.0, 1..64)) {
            let n = xs.len();
            let out = clip_normalize(&vol(&[n, 1], &[1.0, 1.0], xs));
            prop_assert!(out.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn respace_round_trip(
            w in 2usize..9, h in 2usize..9, k in 1usize..4, seed in 0u64..1000,
        ) {
            // a linear field is reproduced by linear interpolation away from the
            // clamped border, so the round trip stays within one grid step of slope
            let (a, b) = ((seed % 7) as f64 * 0.1, (seed % 5) as f64 * 0.2);
            let data: Vec<f32> = (0..w * h).map(|i| (a * (i % w) as f64 + b * (i / w) as f64) as f32).collect();
            let v = vol(&[w, h], &[1.0, 1.0], data);
            let fine = respace(&v, &[1.0 / k as f64, 1.0]).unwrap();
            prop_assert_eq!(fine.shape(), &[w * k, h][..]);
            let back = respace(&fine, &[1.0, 1.0]).unwrap();
            prop_assert_eq!(back.shape(), v.shape());
            let lip = a.max(b);
            for (x, y) in back.data.iter().zip(&v.data) {
                prop_assert!(((x - y).abs() as f64) <= 2.0 * lip * 1.0 + 1e-5);
            }
        }
    }
}
