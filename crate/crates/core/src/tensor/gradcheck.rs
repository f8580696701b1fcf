//! Central finite-difference gradient checking (64-bit only).

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    /// The `±step` evaluations took a different branch at some piecewise op
    /// than the unperturbed one, so the difference quotient straddles a
    /// point where the loss is not differentiable.
    pub crossed_branch: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    /// Probes whose difference quotient stayed on one smooth piece.
    pub fn smooth(&self) -> impl Iterator<Item = &Probe> {
        self.probes.iter().filter(|p| !p.crossed_branch)
    }

    pub fn max_rel_err_smooth(&self) -> f64 {
        self.smooth().map(|p| p.rel_err).fold(0.0, f64::max)
    }

    pub fn worst_smooth(&self) -> Option<&Probe> {
        self.smooth().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    pub fn crossed(&self) -> usize {
        self.probes.iter().filter(|p| p.crossed_branch).count()
    }
}

/// `|a - n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Uniformly samples `count` distinct (input, element) coordinates.
pub fn sample_coords(inputs: &[Tensor<f64>], count: usize, seed: u64) -> Vec<(usize, usize)> {
    let total: usize = inputs.iter().map(Tensor::numel).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flat: Vec<usize> = if count >= total {
        (0..total).collect()
    } else {
        rand::seq::index::sample(&mut rng, total, count).into_vec()
    };
    flat.sort_unstable();
    let mut out = Vec::with_capacity(flat.len());
    let (mut input, mut base) = (0, 0);
    for f in flat {
        while f >= base + inputs[input].numel() {
            base += inputs[input].numel();
            input += 1;
        }
        out.push((input, f - base));
    }
    out
}

/// Compares autodiff gradients of `loss` against central differences at
/// the given coordinates. Every input is registered as a gradient leaf.
pub fn check<F>(inputs: &[Tensor<f64>], coords: &[(usize, usize)], cfg: GradCheckConfig, loss: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut checker = Checker::new(inputs, cfg, loss)?;
    let probes = coords.iter().map(|&c| checker.probe(c)).collect::<Result<_>>()?;
    Ok(GradCheckReport { probes })
}

/// Samples coordinates uniformly until `count` probes stayed on a smooth
/// piece (or every coordinate was tried). Branch-crossing probes are kept in
/// the report but do not count towards `count`.
pub fn check_sampled<F>(inputs: &[Tensor<f64>], count: usize, seed: u64, cfg: GradCheckConfig, loss: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let total: usize = inputs.iter().map(Tensor::numel).sum();
    let order = sample_coords(inputs, total, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perm = rand::seq::index::sample(&mut rng, total, total).into_vec();
    let mut checker = Checker::new(inputs, cfg, loss)?;
    let mut probes = Vec::new();
    let mut smooth = 0;
    for k in perm {
        if smooth >= count {
            break;
        }
        let p = checker.probe(order[k])?;
        smooth += !p.crossed_branch as usize;
        probes.push(p);
    }
    Ok(GradCheckReport { probes })
}

struct Checker<F> {
    work: Vec<Tensor<f64>>,
    grads: Vec<Vec<f64>>,
    base: u64,
    cfg: GradCheckConfig,
    loss: F,
}

impl<F> Checker<F>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    fn new(inputs: &[Tensor<f64>], cfg: GradCheckConfig, mut loss: F) -> Result<Self> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
        let l = loss(&mut tape, &vars)?;
        tape.backward(l)?;
        let grads = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| tape.grad(v).map_or_else(|| alloc::vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect();
        let base = tape.branch_signature();
        Ok(Self {
            work: inputs.to_vec(),
            grads,
            base,
            cfg,
            loss,
        })
    }

    fn eval(&mut self) -> Result<(f64, u64)> {
        // a recording tape so the branch fingerprint sees every op
        let mut t = Tape::new();
        let vs: Vec<Var> = self.work.iter().map(|x| t.param(x)).collect();
        let l = (self.loss)(&mut t, &vs)?;
        Ok((t.item(l), t.branch_signature()))
    }

    fn probe(&mut self, (i, j): (usize, usize)) -> Result<Probe> {
        let h = self.cfg.step;
        let orig = self.work[i].data()[j];
        self.work[i].data_mut()[j] = orig + h;
        let (up, su) = self.eval()?;
        self.work[i].data_mut()[j] = orig - h;
        let (down, sd) = self.eval()?;
        self.work[i].data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = self.grads[i][j];
        Ok(Probe {
            input: i,
            index: j,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric, self.cfg.floor),
            crossed_branch: su != self.base || sd != self.base,
        })
    }
}
