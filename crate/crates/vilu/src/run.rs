//! Training from a manifest with a CSV log and on-disk checkpoints.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use serde::Serialize;
use vilu_core::train::{EpochSummary, Precision, TrainObserver, Trainer};
use vilu_core::Scalar;

use crate::config::RunConfig;
use crate::dataset::{by_split, create_dir, load_samples};
use crate::{checkpoint, Error, Result};

pub const LOG: &str = "train_log.csv";
pub const LAST: &str = "last.ckpt";
pub const BEST: &str = "best.ckpt";

#[derive(Debug, Serialize)]
struct LogRow {
    step: u64,
    epoch: usize,
    loss: f64,
    val_dsc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub steps: u64,
    pub epochs: usize,
    pub best_val_dsc: Option<f64>,
    pub last_checkpoint: PathBuf,
    pub log: PathBuf,
}

struct FileObserver {
    log: csv::Writer<std::fs::File>,
    log_path: PathBuf,
    ckpt_dir: PathBuf,
}

impl<S: Scalar> TrainObserver<S> for FileObserver {
    fn on_epoch_end(&mut self, t: &Trainer<S>, s: &EpochSummary) -> vilu_core::Result<()> {
        let val = s.validation.as_ref().map(|v| v.aggregate.mean.dsc);
        let n = s.steps.len();
        let io = |e: std::io::Error| vilu_core::Error::Contract(format!("{}: {e}", self.log_path.display()));
        for (i, r) in s.steps.iter().enumerate() {
            let row = LogRow {
                step: r.step,
                epoch: r.epoch,
                loss: r.loss,
                val_dsc: if i + 1 == n { val } else { None },
            };
            self.log
                .serialize(row)
                .map_err(|e| vilu_core::Error::Contract(format!("{}: {e}", self.log_path.display())))?;
        }
        self.log.flush().map_err(io)?;
        if s.checkpoint_due {
            let last = self.ckpt_dir.join(LAST);
            checkpoint::save(&last, t).map_err(|e| vilu_core::Error::Contract(e.to_string()))?;
            if s.is_best {
                let best = self.ckpt_dir.join(BEST);
                std::fs::copy(&last, &best).map_err(|e| vilu_core::Error::Contract(format!("{}: {e}", best.display())))?;
            }
        }
        Ok(())
    }
}

/// Trains on the manifest's `train` cases and validates on its `val` cases.
///
/// The log is `out/train_log.csv`; checkpoints go to
/// `train.checkpoint_dir` (relative to `out` unless absolute). A fresh run
/// truncates the log, a resumed run appends to it.
pub fn train(cfg: &RunConfig, manifest: &Path, out: &Path, resume: Option<&Path>) -> Result<RunSummary> {
    match cfg.train.precision {
        Precision::F32 => train_typed::<f32>(cfg, manifest, out, resume),
        Precision::F64 => train_typed::<f64>(cfg, manifest, out, resume),
    }
}

fn train_typed<S: Scalar>(cfg: &RunConfig, manifest: &Path, out: &Path, resume: Option<&Path>) -> Result<RunSummary> {
    let samples = load_samples(manifest, Some(cfg.network.num_classes))?;
    let (train, val, _) = by_split(samples);
    if train.is_empty() {
        return Err(Error::format(manifest, "manifest has no cases in the train split"));
    }
    create_dir(out)?;
    let ckpt_dir = out.join(&cfg.train.checkpoint_dir);
    create_dir(&ckpt_dir)?;
    let mut trainer = match resume {
        None => Trainer::<S>::new(cfg.network.clone(), cfg.train.clone())?,
        Some(p) => {
            let header = checkpoint::read_header(p)?;
            checkpoint::check_network(&header, &cfg.network)?;
            let t = checkpoint::load::<S>(p)?;
            Trainer::from_parts(t.net, t.store, cfg.train.clone(), t.state)?
        }
    };
    let resolved = serde_json::to_vec_pretty(cfg).expect("config serialises");
    let cfg_path = out.join("run_config.json");
    std::fs::write(&cfg_path, resolved).map_err(|e| Error::io(&cfg_path, e))?;

    let log_path = out.join(LOG);
    let fresh = resume.is_none() || !log_path.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let log = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    let mut obs = FileObserver {
        log,
        log_path: log_path.clone(),
        ckpt_dir: ckpt_dir.clone(),
    };
    trainer.fit(&train, &val, &cfg.metrics, &mut obs)?;
    Ok(RunSummary {
        steps: trainer.state.step,
        epochs: trainer.state.epoch,
        best_val_dsc: trainer.state.best_val_dsc,
        last_checkpoint: ckpt_dir.join(LAST),
        log: log_path,
    })
}
