//! Adam, the epoch loop and evaluation.
//!
//! The loop is storage-agnostic: checkpoints and logs are written by a
//! [`TrainObserver`] supplied by the caller.

mod adam;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState};

use crate::data::{LabelMap, Sample};
use crate::loss::combined_loss;
use crate::metrics::{evaluate_pair, MetricsConfig, MetricsReport};
use crate::net::{argmax_channels, NetworkConfig, VilUNet};
use crate::nn::{keyed_rng, ParamStore};
use crate::tensor::{Tape, Tensor};
use crate::{Error, Result, Scalar};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Validate and checkpoint every this many epochs (and after the last).
    pub val_interval: usize,
    pub checkpoint_dir: String,
    pub precision: Precision,
    /// Global gradient L2 norm bound; off when `None`.
    pub clip_norm: Option<f64>,
    /// `lr · (1 - step/total)^power`; constant rate when `None`.
    pub poly_decay_power: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.005,
            batch_size: 2,
            epochs: 50,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            val_interval: 10,
            checkpoint_dir: "checkpoints".into(),
            precision: Precision::F32,
            clip_norm: None,
            poly_decay_power: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.val_interval == 0 {
            return bad("val_interval must be >= 1".into());
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad(format!("betas must lie in [0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be > 0, got {}", self.eps));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip_norm must be > 0, got {c}"));
            }
        }
        if let Some(p) = self.poly_decay_power {
            if !(p >= 0.0) {
                return bad(format!("poly_decay_power must be >= 0, got {p}"));
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            clip_norm: self.clip_norm,
        }
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

/// Everything needed to continue a run exactly.
///
/// The shuffle generator is keyed on `(seed, epoch)`, so `epoch` is its
/// whole state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<S> {
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub adam: AdamState<S>,
    pub best_val_dsc: Option<f64>,
    pub best_epoch: Option<usize>,
}

impl<S: Scalar> TrainState<S> {
    pub fn new(store: &ParamStore<S>) -> Self {
        Self {
            step: 0,
            epoch: 0,
            adam: AdamState::new(store),
            best_val_dsc: None,
            best_epoch: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub cases: Vec<(String, MetricsReport)>,
    pub aggregate: MetricsReport,
}

#[derive(Clone, Debug)]
pub struct EpochSummary {
    /// Zero-based index of the epoch just finished.
    pub epoch: usize,
    pub steps: Vec<StepRecord>,
    pub validation: Option<Evaluation>,
    /// True when this epoch set a new best validation DSC.
    pub is_best: bool,
    /// True when a checkpoint is due (validation interval or last epoch).
    pub checkpoint_due: bool,
}

/// Hook for persisting progress. Returning an error stops the run.
pub trait TrainObserver<S: Scalar> {
    fn on_epoch_end(&mut self, trainer: &Trainer<S>, summary: &EpochSummary) -> Result<()>;
}

impl<S: Scalar> TrainObserver<S> for () {
    fn on_epoch_end(&mut self, _: &Trainer<S>, _: &EpochSummary) -> Result<()> {
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Trainer<S> {
    pub net: VilUNet,
    pub store: ParamStore<S>,
    pub cfg: TrainConfig,
    pub state: TrainState<S>,
}

/// Stacks same-shape single-channel samples into `[B, 1, spatial...]` and
/// the matching flattened labels.
pub fn collate<S: Scalar>(batch: &[&Sample]) -> Result<(Tensor<S>, Vec<u8>)> {
    let first = batch.first().ok_or(Error::Contract("empty batch".into()))?;
    let geo = &first.image.geometry;
    let mut x = Vec::with_capacity(batch.len() * geo.numel());
    let mut y = Vec::with_capacity(batch.len() * geo.numel());
    for s in batch {
        if s.image.shape() != geo.shape.as_slice() {
            return Err(Error::dim(
                "collate",
                format!("case {} has shape {:?}, batch has {:?}", s.case_id, s.image.shape(), geo.shape),
            ));
        }
        x.extend(s.image.data.iter().map(|&v| S::lit(v as f64)));
        y.extend_from_slice(&s.label.data);
    }
    let mut shape = alloc::vec![batch.len(), 1];
    shape.extend(geo.row_major_extents());
    Ok((Tensor::new(&shape, x)?, y))
}

impl<S: Scalar> Trainer<S> {
    /// Fresh run: parameters are initialised from `cfg.seed`.
    pub fn new(net_cfg: NetworkConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(cfg.seed);
        let net = VilUNet::new(net_cfg, &mut store)?;
        let state = TrainState::new(&store);
        Ok(Self { net, store, cfg, state })
    }

    /// Resumed run. Moments must match the parameters one to one.
    pub fn from_parts(net: VilUNet, store: ParamStore<S>, cfg: TrainConfig, state: TrainState<S>) -> Result<Self> {
        cfg.validate()?;
        state.adam.check_matches(&store)?;
        Ok(Self { net, store, cfg, state })
    }

    /// Visiting order of `n` training cases in `epoch`.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = keyed_rng(self.cfg.seed, &format!("shuffle/epoch{epoch}"));
        order.shuffle(&mut rng);
        order
    }

    /// Rate in effect for the next step.
    pub fn current_lr(&self, total_steps: u64) -> f64 {
        match self.cfg.poly_decay_power {
            None => self.cfg.lr,
            Some(p) => {
                let frac = 1.0 - (self.state.step as f64 / total_steps.max(1) as f64).min(1.0);
                self.cfg.lr * num_traits::Float::powf(frac, p)
            }
        }
    }

    fn check_batch(&self, batch: &[&Sample]) -> Result<()> {
        let k = self.net.config().num_classes;
        for s in batch {
            if s.label.num_classes > k {
                return Err(Error::Config(format!(
                    "case {} has {} classes, the network predicts {k}",
                    s.case_id, s.label.num_classes
                )));
            }
        }
        Ok(())
    }

    /// Loss and gradients at the current parameters, without updating them.
    /// Parameter grad buffers hold the fresh gradient afterwards.
    pub fn compute_gradients(&mut self, batch: &[&Sample]) -> Result<f64> {
        self.check_batch(batch)?;
        let (x, y) = collate::<S>(batch)?;
        let mut tape = Tape::new();
        let bind = self.store.bind(&mut tape);
        let xv = tape.constant(&x);
        let out = self.net.forward(&mut tape, &bind, xv)?;
        let terms = combined_loss(&mut tape, out.logits, &y)?;
        let loss = tape.item(terms.total).as_f64();
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "training loss" });
        }
        tape.backward(terms.total)?;
        self.store.zero_grads();
        self.store.accumulate_grads(&tape, &bind)?;
        Ok(loss)
    }

    /// One optimizer step on `batch`. Nothing is modified when the loss or
    /// a gradient is non-finite.
    pub fn train_step(&mut self, batch: &[&Sample], total_steps: u64) -> Result<f64> {
        let loss = self.compute_gradients(batch)?;
        let mut adam = self.cfg.adam();
        adam.lr = self.current_lr(total_steps);
        adam_step(&mut self.store, &mut self.state.adam, &adam)?;
        self.state.step += 1;
        Ok(loss)
    }

    /// Runs the remaining epochs, reporting each to `observer`.
    pub fn fit(&mut self, train: &[Sample], val: &[Sample], metrics: &MetricsConfig, observer: &mut impl TrainObserver<S>) -> Result<()> {
        if train.is_empty() {
            return Err(Error::Contract("training set is empty".into()));
        }
        let per_epoch = self.cfg.steps_per_epoch(train.len());
        let total = (per_epoch * self.cfg.epochs) as u64;
        while self.state.epoch < self.cfg.epochs {
            let epoch = self.state.epoch;
            let order = self.epoch_order(epoch, train.len());
            let mut steps = Vec::with_capacity(per_epoch);
            for chunk in order.chunks(self.cfg.batch_size) {
                let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
                let loss = self.train_step(&batch, total)?;
                steps.push(StepRecord {
                    step: self.state.step,
                    epoch,
                    loss,
                });
            }
            self.state.epoch += 1;
            let checkpoint_due = self.state.epoch.is_multiple_of(self.cfg.val_interval) || self.state.epoch == self.cfg.epochs;
            let mut is_best = false;
            let validation = if checkpoint_due && !val.is_empty() {
                let ev = self.evaluate(val, metrics)?;
                let dsc = ev.aggregate.mean.dsc;
                if self.state.best_val_dsc.is_none_or(|b| dsc > b) {
                    self.state.best_val_dsc = Some(dsc);
                    self.state.best_epoch = Some(epoch);
                    is_best = true;
                }
                Some(ev)
            } else {
                None
            };
            let summary = EpochSummary {
                epoch,
                steps,
                validation,
                is_best,
                checkpoint_due,
            };
            observer.on_epoch_end(self, &summary)?;
        }
        Ok(())
    }

    /// Arg-max label map for one case, on the case's own grid.
    pub fn predict(&self, sample: &Sample) -> Result<LabelMap> {
        let (x, _) = collate::<S>(&[sample])?;
        let logits = self.net.logits(&self.store, &x)?;
        LabelMap::new(
            sample.image.geometry.clone(),
            argmax_channels(&logits),
            self.net.config().num_classes,
        )
    }

    /// Per-case metrics against each sample's label and their unweighted mean.
    pub fn evaluate(&self, samples: &[Sample], metrics: &MetricsConfig) -> Result<Evaluation> {
        let cases = samples
            .iter()
            .map(|s| {
                let pred = self.predict(s)?;
                Ok((s.case_id.clone(), evaluate_pair(&pred, &s.label, metrics)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let reports: Vec<MetricsReport> = cases.iter().map(|(_, r)| r.clone()).collect();
        let aggregate = MetricsReport::aggregate(&reports)?;
        Ok(Evaluation { cases, aggregate })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthConfig};

    fn tiny_setup(n: usize) -> (Vec<Sample>, NetworkConfig) {
        let data = synth_dataset(&SynthConfig {
            n_cases: n,
            shape: alloc::vec![16, 16],
            ..SynthConfig::default()
        })
        .unwrap();
        (data, NetworkConfig::tiny())
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for c in [
            TrainConfig { lr: 0.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { epochs: 0, ..Default::default() },
        ] {
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn step_count_and_determinism() {
        let (data, net) = tiny_setup(3);
        let cfg = TrainConfig {
            epochs: 2,
            val_interval: 1,
            ..Default::default()
        };
        struct Log(Vec<f64>, usize);
        impl TrainObserver<f64> for Log {
            fn on_epoch_end(&mut self, _: &Trainer<f64>, s: &EpochSummary) -> Result<()> {
                self.0.extend(s.steps.iter().map(|r| r.loss));
                self.1 += s.checkpoint_due as usize;
                Ok(())
            }
        }
        let run = || {
            let mut t = Trainer::<f64>::new(net.clone(), cfg.clone()).unwrap();
            let mut log = Log(Vec::new(), 0);
            t.fit(&data, &data[..1], &MetricsConfig::default(), &mut log).unwrap();
            (t, log)
        };
        let (t1, l1) = run();
        let (t2, l2) = run();
        assert_eq!(t1.state.step, 4);
        assert_eq!(l1.0.len(), 4);
        assert_eq!(l1.1, 2);
        assert_eq!(l1.0, l2.0);
        assert_eq!(t1.store, t2.store);
        assert!(t1.state.best_val_dsc.is_some());
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let (data, net) = tiny_setup(4);
        let cfg = TrainConfig {
            epochs: 3,
            ..Default::default()
        };
        let mut full = Trainer::<f64>::new(net.clone(), cfg.clone()).unwrap();
        full.fit(&data, &[], &MetricsConfig::default(), &mut ()).unwrap();

        let mut first = Trainer::<f64>::new(net, TrainConfig { epochs: 1, ..cfg.clone() }).unwrap();
        first.fit(&data, &[], &MetricsConfig::default(), &mut ()).unwrap();
        let Trainer { net, store, state, .. } = first;
        let mut second = Trainer::from_parts(net, store, cfg, state).unwrap();
        second.fit(&data, &[], &MetricsConfig::default(), &mut ()).unwrap();
        assert_eq!(second.state, full.state);
        assert_eq!(second.store, full.store);
    }

    #[test]
    fn shuffle_depends_on_epoch_only() {
        let (_, net) = tiny_setup(1);
        let t = Trainer::<f32>::new(net, TrainConfig::default()).unwrap();
        let a = t.epoch_order(3, 10);
        assert_eq!(a, t.epoch_order(3, 10));
        assert_ne!(a, t.epoch_order(4, 10));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn self_and_background_evaluation() {
        let (data, net) = tiny_setup(2);
        let t = Trainer::<f64>::new(net, TrainConfig::default()).unwrap();
        for s in &data {
            let r = evaluate_pair(&s.label, &s.label, &MetricsConfig::default()).unwrap();
            assert_eq!((r.mean.dsc, r.mean.iou, r.mean.nsd, r.mean.hd), (1.0, 1.0, 1.0, 0.0));
            let bg = LabelMap::new(s.label.geometry.clone(), alloc::vec![0; s.label.data.len()], 2).unwrap();
            assert_eq!(evaluate_pair(&bg, &s.label, &MetricsConfig::default()).unwrap().mean.dsc, 0.0);
        }
        let ev = t.evaluate(&data, &MetricsConfig::default()).unwrap();
        let mean = ev.cases.iter().map(|(_, r)| r.mean.dsc).sum::<f64>() / 2.0;
        assert!((ev.aggregate.mean.dsc - mean).abs() < 1e-12);
    }

    #[test]
    fn poly_decay_reaches_zero() {
        let (_, net) = tiny_setup(1);
        let mut t = Trainer::<f32>::new(
            net,
            TrainConfig {
                poly_decay_power: Some(0.9),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(t.current_lr(10), 0.005);
        t.state.step = 10;
        assert_eq!(t.current_lr(10), 0.0);
    }
}
