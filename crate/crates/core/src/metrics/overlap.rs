use alloc::format;

use crate::data::LabelMap;
use crate::{Error, Result};

/// `(DSC, IoU)` of two boolean masks; both empty counts as a perfect match.
pub fn dsc_iou_masks(a: &[bool], b: &[bool]) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::dim("dsc_iou", format!("{} vs {} voxels", a.len(), b.len())));
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok((1.0, 1.0));
    }
    let union = na + nb - inter;
    Ok((2.0 * inter as f64 / (na + nb) as f64, inter as f64 / union as f64))
}

/// Overlap of class `class` between two aligned label maps.
pub fn dsc_iou(pred: &LabelMap, reference: &LabelMap, class: u8) -> Result<(f64, f64)> {
    if pred.shape() != reference.shape() {
        return Err(Error::dim(
            "dsc_iou",
            format!("pred shape {:?} vs reference shape {:?}", pred.shape(), reference.shape()),
        ));
    }
    dsc_iou_masks(&pred.mask(class), &reference.mask(class))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        let a = [true, true, false, false];
        assert_eq!(dsc_iou_masks(&a, &a).unwrap(), (1.0, 1.0));
        assert_eq!(dsc_iou_masks(&a, &[false, false, true, true]).unwrap(), (0.0, 0.0));
        let (d, i) = dsc_iou_masks(&a, &[false, true, true, false]).unwrap();
        assert_eq!(d, 0.5);
        assert!((i - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(dsc_iou_masks(&[false; 3], &[false; 3]).unwrap(), (1.0, 1.0));
        assert!(dsc_iou_masks(&[false; 3], &[false; 4]).is_err());
    }

    proptest! {
        #[test]
        fn symmetric_and_consistent(bits in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..200)) {
            let a: alloc::vec::Vec<bool> = bits.iter().map(|p| p.0).collect();
            let b: alloc::vec::Vec<bool> = bits.iter().map(|p| p.1).collect();
            let (d, i) = dsc_iou_masks(&a, &b).unwrap();
            prop_assert_eq!((d, i), dsc_iou_masks(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&d) && (0.0..=1.0).contains(&i));
            prop_assert!(i <= d);
            prop_assert!((d - 2.0 * i / (1.0 + i)).abs() < 1e-12);
        }

        #[test]
        fn growing_overlap_is_monotone(n in 4usize..60, k in 1usize..30, shift in 1usize..30) {
            // fixed-size runs of k voxels; reducing the offset raises the overlap
            let k = k.min(n / 2);
            let run = |off: usize| (0..n).map(|i| i >= off && i < off + k).collect::<alloc::vec::Vec<_>>();
            let a = run(0);
            let far = shift.min(n - k);
            let (d1, i1) = dsc_iou_masks(&a, &run(far)).unwrap();
            let (d2, i2) = dsc_iou_masks(&a, &run(far - 1)).unwrap();
            prop_assert!(d2 >= d1 && i2 >= i1);
        }
    }
}
