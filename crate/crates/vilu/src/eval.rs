//! Scoring predictions (from files or a checkpoint) against a manifest.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use vilu_core::data::LabelMap;
use vilu_core::metrics::{evaluate_pair, MetricsConfig, MetricsReport};
use vilu_core::train::Trainer;
use vilu_core::Scalar;

use crate::dataset::{create_dir, load_samples, read_manifest, with_class_count};
use crate::nrrd::{self, Encoding};
use crate::{checkpoint, Error, Result};

pub enum Predictions<'a> {
    /// Label files named like the reference label files, in this directory.
    Dir(&'a Path),
    /// Run this checkpoint on every reference image.
    Checkpoint(&'a Path),
}

#[derive(Debug, Serialize)]
struct CsvRow<'a> {
    case_id: &'a str,
    class: String,
    dsc: f64,
    iou: f64,
    nsd: f64,
    hd: f64,
    hd95: f64,
}

#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub cases: Vec<(String, MetricsReport)>,
    pub aggregate: MetricsReport,
    pub csv: PathBuf,
}

fn predict_all<S: Scalar>(ckpt: &Path, manifest: &Path, pred_dir: &Path) -> Result<()> {
    let t: Trainer<S> = checkpoint::load(ckpt)?;
    let samples = load_samples(manifest, None)?;
    create_dir(pred_dir)?;
    let entries = read_manifest(manifest)?;
    samples.par_iter().zip(&entries).try_for_each(|(s, e)| {
        let pred = t.predict(s)?;
        let name = Path::new(&e.label_path).file_name().expect("label path has a file name");
        nrrd::write_labels(&pred_dir.join(name), &pred, Encoding::Raw)
    })
}

/// Per-case JSON reports in `out/metrics/`, one CSV (`out/metrics.csv`)
/// with a row per case and class plus `mean` rows, and `out/aggregate.json`.
///
/// Every case is scored over `num_classes` classes, or over the classes
/// present in any case when `None` (raised to the network's count when
/// predicting from a checkpoint).
pub fn evaluate(manifest: &Path, preds: Predictions, num_classes: Option<usize>, metrics: &MetricsConfig, out: &Path) -> Result<EvalOutput> {
    create_dir(out)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut min_classes = num_classes.unwrap_or(2);
    let pred_dir = match preds {
        Predictions::Dir(d) => d.to_path_buf(),
        Predictions::Checkpoint(c) => {
            let d = out.join("predictions");
            let header = checkpoint::read_header(c)?;
            min_classes = min_classes.max(header.network.num_classes);
            match header.dtype.as_str() {
                "f64" => predict_all::<f64>(c, manifest, &d)?,
                _ => predict_all::<f32>(c, manifest, &d)?,
            }
            d
        }
    };
    let entries = read_manifest(manifest)?;
    let pairs: Vec<(LabelMap, LabelMap)> = entries
        .par_iter()
        .map(|e| {
            let reference = nrrd::read_labels(&base.join(&e.label_path), 256)?;
            let name = Path::new(&e.label_path).file_name().expect("label path has a file name");
            let pred_path = pred_dir.join(name);
            let pred = nrrd::read_labels(&pred_path, 256)?;
            if pred.geometry.shape != reference.geometry.shape {
                return Err(Error::format(
                    &pred_path,
                    format!("shape {:?} differs from reference {:?}", pred.geometry.shape, reference.geometry.shape),
                ));
            }
            Ok((with_class_count(pred, min_classes), with_class_count(reference, min_classes)))
        })
        .collect::<Result<_>>()?;
    let present = pairs.iter().map(|(p, r)| p.num_classes.max(r.num_classes)).max().unwrap_or(2);
    let k = match num_classes {
        Some(k) if present > k => {
            return Err(Error::Usage(format!("labels reach class {} but {k} classes were requested", present - 1)));
        }
        _ => present,
    };
    let cases: Vec<(String, MetricsReport)> = pairs
        .into_par_iter()
        .zip(entries.par_iter())
        .map(|((pred, reference), e)| {
            let pred = LabelMap { num_classes: k, ..pred };
            let reference = LabelMap { num_classes: k, ..reference };
            Ok((e.case_id.clone(), evaluate_pair(&pred, &reference, metrics)?))
        })
        .collect::<Result<_>>()?;
    let reports: Vec<MetricsReport> = cases.iter().map(|(_, r)| r.clone()).collect();
    let aggregate = MetricsReport::aggregate(&reports)?;

    let mdir = out.join("metrics");
    create_dir(&mdir)?;
    let write_json = |path: PathBuf, r: &MetricsReport| -> Result<()> {
        let bytes = serde_json::to_vec_pretty(r).expect("report serialises");
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    };
    for (id, r) in &cases {
        write_json(mdir.join(format!("{id}.json")), r)?;
    }
    write_json(out.join("aggregate.json"), &aggregate)?;

    let csv_path = out.join("metrics.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::format(&csv_path, e.to_string()))?;
    let rows = cases
        .iter()
        .map(|(id, r)| (id.as_str(), r))
        .chain(std::iter::once(("mean", &aggregate)));
    for (id, r) in rows {
        let mut put = |class: String, m: &vilu_core::metrics::ClassMetrics| {
            w.serialize(CsvRow {
                case_id: id,
                class,
                dsc: m.dsc,
                iou: m.iou,
                nsd: m.nsd,
                hd: m.hd,
                hd95: m.hd95,
            })
        };
        for (c, m) in &r.per_class {
            put(c.to_string(), m).map_err(|e| Error::format(&csv_path, e.to_string()))?;
        }
        put("mean".into(), &r.mean).map_err(|e| Error::format(&csv_path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    Ok(EvalOutput {
        cases,
        aggregate,
        csv: csv_path,
    })
}
