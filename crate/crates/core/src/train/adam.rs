use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;

use crate::nn::ParamStore;
use crate::{Error, Result, Scalar};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

/// First and second moments, one buffer per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub step: u64,
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(store: &ParamStore<S>) -> Self {
        let zeros: Vec<Vec<S>> = store.iter().map(|p| alloc::vec![S::zero(); p.tensor.numel()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn check_matches(&self, store: &ParamStore<S>) -> Result<()> {
        if self.m.len() != store.len() || self.v.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameters but {} / {} moment buffers",
                store.len(),
                self.m.len(),
                self.v.len()
            )));
        }
        let mut diffs = Vec::new();
        for ((p, m), v) in store.iter().zip(&self.m).zip(&self.v) {
            if m.len() != p.tensor.numel() || v.len() != p.tensor.numel() {
                diffs.push(format!("{}: {} values vs moments {} / {}", p.name, p.tensor.numel(), m.len(), v.len()));
            }
        }
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint(diffs.join("; ")))
        }
    }
}

/// One bias-corrected Adam update from the gradients held in `store`.
///
/// Every gradient is checked before anything is written, so on error the
/// parameters and moments are untouched.
pub fn adam_step<S: Scalar>(store: &mut ParamStore<S>, state: &mut AdamState<S>, cfg: &AdamConfig) -> Result<()> {
    state.check_matches(store)?;
    let mut sq = 0.0f64;
    for p in store.iter() {
        let g = p
            .tensor
            .grad()
            .ok_or_else(|| Error::Contract(format!("parameter {} has no gradient", p.name)))?;
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
        sq += g.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>();
    }
    let scale = match cfg.clip_norm {
        Some(c) if Float::sqrt(sq) > c => S::lit(c / Float::sqrt(sq)),
        _ => S::one(),
    };
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (S::lit(cfg.beta1), S::lit(cfg.beta2));
    let bc1 = S::lit(1.0 - Float::powi(cfg.beta1, t));
    let bc2 = S::lit(1.0 - Float::powi(cfg.beta2, t));
    let (lr, eps) = (S::lit(cfg.lr), S::lit(cfg.eps));
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let g: Vec<S> = p.tensor.grad().expect("checked above").iter().map(|&x| x * scale).collect();
        let theta = p.tensor.data_mut();
        for i in 0..theta.len() {
            m[i] = b1 * m[i] + (S::one() - b1) * g[i];
            v[i] = b2 * v[i] + (S::one() - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
