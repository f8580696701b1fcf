use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use super::{dsc_iou_masks, hausdorff, nsd, surface_extract, Hausdorff};
use crate::data::LabelMap;
use crate::{Error, Result};

/// Neighbourhood used for boundary extraction.
pub const CONNECTIVITY: &str = "face";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub nsd_tolerance_mm: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { nsd_tolerance_mm: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub dsc: f64,
    pub iou: f64,
    pub nsd: f64,
    /// mm. When exactly one mask is empty this is the grid diagonal and
    /// `hd_undefined` is set.
    pub hd: f64,
    pub hd95: f64,
    pub hd_undefined: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: BTreeMap<u8, ClassMetrics>,
    /// Unweighted mean over foreground classes.
    pub mean: ClassMetrics,
    pub nsd_tolerance_mm: f64,
    pub connectivity: String,
    /// Convention applied when both masks of a class are empty.
    pub empty_convention: String,
}

fn diagonal_mm(shape: &[usize], spacing: &[f64]) -> f64 {
    Float::sqrt(shape.iter().zip(spacing).map(|(&n, &s)| (n as f64 * s) * (n as f64 * s)).sum::<f64>())
}

fn mean_metrics<'a>(items: impl Iterator<Item = &'a ClassMetrics>) -> ClassMetrics {
    let mut m = ClassMetrics::default();
    let mut n = 0usize;
    for c in items {
        m.dsc += c.dsc;
        m.iou += c.iou;
        m.nsd += c.nsd;
        m.hd += c.hd;
        m.hd95 += c.hd95;
        m.hd_undefined |= c.hd_undefined;
        n += 1;
    }
    if n > 0 {
        let k = n as f64;
        m.dsc /= k;
        m.iou /= k;
        m.nsd /= k;
        m.hd /= k;
        m.hd95 /= k;
    }
    m
}

/// Every metric for every foreground class of one prediction/reference pair.
pub fn evaluate_pair(pred: &LabelMap, reference: &LabelMap, cfg: &MetricsConfig) -> Result<MetricsReport> {
    if pred.shape() != reference.shape() {
        return Err(Error::dim(
            "evaluate",
            format!("pred shape {:?} vs reference shape {:?}", pred.shape(), reference.shape()),
        ));
    }
    let k = pred.num_classes.max(reference.num_classes);
    let shape = reference.shape();
    let spacing = reference.spacing();
    let mut per_class = BTreeMap::new();
    for class in 1..k {
        let c = class as u8;
        let (a, b) = (pred.mask(c), reference.mask(c));
        let (dsc, iou) = dsc_iou_masks(&a, &b)?;
        let (sa, sb) = (surface_extract(&a, shape), surface_extract(&b, shape));
        let (hd, hd95, hd_undefined) = match hausdorff(&sa, &sb, spacing)? {
            Hausdorff::Distances { hd, hd95 } => (hd, hd95, false),
            Hausdorff::Undefined => {
                let d = diagonal_mm(shape, spacing);
                (d, d, true)
            }
        };
        let nsd = nsd(&sa, &sb, spacing, cfg.nsd_tolerance_mm)?;
        per_class.insert(
            c,
            ClassMetrics {
                dsc,
                iou,
                nsd,
                hd,
                hd95,
                hd_undefined,
            },
        );
    }
    let mean = mean_metrics(per_class.values());
    Ok(MetricsReport {
        per_class,
        mean,
        nsd_tolerance_mm: cfg.nsd_tolerance_mm,
        connectivity: CONNECTIVITY.into(),
        empty_convention: "both masks empty: dsc = iou = nsd = 1, hd = hd95 = 0".into(),
    })
}

impl MetricsReport {
    /// Unweighted mean of per-case reports (per class and overall).
    pub fn aggregate(reports: &[MetricsReport]) -> Result<MetricsReport> {
        let first = reports
            .first()
            .ok_or_else(|| Error::Contract("cannot aggregate zero reports".into()))?;
        let mut per_class = BTreeMap::new();
        for &c in first.per_class.keys() {
            let items: Vec<&ClassMetrics> = reports
                .iter()
                .map(|r| {
                    r.per_class
                        .get(&c)
                        .ok_or_else(|| Error::Contract(format!("class {c} missing from a case report")))
                })
                .collect::<Result<_>>()?;
            per_class.insert(c, mean_metrics(items.into_iter()));
        }
        Ok(MetricsReport {
            per_class,
            mean: mean_metrics(reports.iter().map(|r| &r.mean)),
            nsd_tolerance_mm: first.nsd_tolerance_mm,
            connectivity: first.connectivity.clone(),
            empty_convention: first.empty_convention.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Geometry;

    fn labels(data: Vec<u8>) -> LabelMap {
        LabelMap::new(Geometry::new(&[4, 4], &[1.0, 1.0]).unwrap(), data, 3).unwrap()
    }

    #[test]
    fn self_evaluation_is_perfect() {
        let l = labels((0..16).map(|i| (i % 3) as u8).collect());
        let r = evaluate_pair(&l, &l, &MetricsConfig::default()).unwrap();
        for m in r.per_class.values() {
            assert_eq!((m.dsc, m.iou, m.nsd, m.hd, m.hd95), (1.0, 1.0, 1.0, 0.0, 0.0));
        }
        assert_eq!(r.per_class.len(), 2);
    }

    #[test]
    fn background_prediction_scores_zero() {
        let reference = labels((0..16).map(|i| (i % 3) as u8).collect());
        let r = evaluate_pair(&labels(alloc::vec![0; 16]), &reference, &MetricsConfig::default()).unwrap();
        for m in r.per_class.values() {
            assert_eq!((m.dsc, m.iou, m.nsd), (0.0, 0.0, 0.0));
            assert!(m.hd_undefined);
            assert!((m.hd - 32f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_is_unweighted_mean() {
        let a = labels((0..16).map(|i| (i % 3) as u8).collect());
        let b = labels((0..16).map(|i| (i % 2) as u8).collect());
        let c = labels((0..16).map(|i| (i / 8) as u8).collect());
        let cfg = MetricsConfig::default();
        let reps = [evaluate_pair(&b, &a, &cfg).unwrap(), evaluate_pair(&c, &a, &cfg).unwrap()];
        let agg = MetricsReport::aggregate(&reps).unwrap();
        let want = (reps[0].mean.dsc + reps[1].mean.dsc) / 2.0;
        assert!((agg.mean.dsc - want).abs() < 1e-12);
        let want1 = (reps[0].per_class[&1].hd95 + reps[1].per_class[&1].hd95) / 2.0;
        assert!((agg.per_class[&1].hd95 - want1).abs() < 1e-12);
    }
}
