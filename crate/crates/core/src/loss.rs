//! Soft Dice + cross-entropy objective on raw logits.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result, Scalar};

pub const DICE_EPS: f64 = 1e-5;

/// Both terms of the objective as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub ce: Var,
    pub dice: Var,
}

/// One-hot `[B, K, spatial...]` encoding of `labels[B, spatial...]`.
pub fn one_hot<S: Scalar>(labels: &[u8], logits_shape: &[usize]) -> Result<Tensor<S>> {
    if logits_shape.len() < 2 {
        return Err(Error::dim("combined_loss", format!("logits need [B, K, ...], got {logits_shape:?}")));
    }
    let (b, k) = (logits_shape[0], logits_shape[1]);
    let inner: usize = logits_shape[2..].iter().product();
    if labels.len() != b * inner {
        return Err(Error::dim(
            "combined_loss",
            format!("{} labels for logits {logits_shape:?}", labels.len()),
        ));
    }
    let mut data = vec![S::zero(); b * k * inner];
    for bi in 0..b {
        for i in 0..inner {
            let c = labels[bi * inner + i] as usize;
            if c >= k {
                return Err(Error::Label { value: c, num_classes: k });
            }
            data[(bi * k + c) * inner + i] = S::one();
        }
    }
    Tensor::new(logits_shape, data)
}

/// Sum over every axis except the class axis: `[B, K, ...] -> [K]`.
fn per_class_sum<S: Scalar>(tape: &mut Tape<S>, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let mut perm: Vec<usize> = (0..shape.len()).collect();
    perm.swap(0, 1);
    let t = tape.permute(x, &perm)?;
    let rest = shape.iter().product::<usize>() / shape[1];
    let t = tape.reshape(t, &[shape[1], rest])?;
    tape.sum_axis(t, 1)
}

/// `L = L_ce + L_dice` with unit weights.
///
/// `L_ce` is the mean per-pixel negative log-probability of the true class.
/// `L_dice = 1 - mean_k (2 Σ p g + ε) / (Σ p + Σ g + ε)` where the sums run
/// over the whole batch and every spatial position.
pub fn combined_loss<S: Scalar>(tape: &mut Tape<S>, logits: Var, labels: &[u8]) -> Result<LossTerms> {
    let shape = tape.shape(logits).to_vec();
    let g = one_hot::<S>(labels, &shape)?;
    let pixels = labels.len();
    let g = tape.constant(&g);

    let logp = tape.log_softmax(logits, 1)?;
    let picked = tape.mul(logp, g)?;
    let total_logp = tape.sum(picked)?;
    let ce = tape.scale(total_logp, -S::one() / S::lit(pixels as f64))?;

    let p = tape.softmax(logits, 1)?;
    let pg = tape.mul(p, g)?;
    let inter = per_class_sum(tape, pg)?;
    let sp = per_class_sum(tape, p)?;
    let sg = per_class_sum(tape, g)?;
    let eps = S::lit(DICE_EPS);
    let num = tape.scale(inter, S::lit(2.0))?;
    let num = tape.add_scalar(num, eps)?;
    let den = tape.add(sp, sg)?;
    let den = tape.add_scalar(den, eps)?;
    let ratio = tape.div(num, den)?;
    let mean_dice = tape.mean(ratio)?;
    let dice = tape.scale(mean_dice, -S::one())?;
    let dice = tape.add_scalar(dice, S::one())?;
    let total = tape.add(ce, dice)?;
    Ok(LossTerms { total, ce, dice })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{self, GradCheckConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn eval(logits: &Tensor<f64>, labels: &[u8]) -> (f64, f64, f64) {
        let mut tape = Tape::inference();
        let x = tape.constant(logits);
        let t = combined_loss(&mut tape, x, labels).unwrap();
        (tape.item(t.total), tape.item(t.ce), tape.item(t.dice))
    }

    #[test]
    fn confident_correct_logits_give_near_zero_loss() {
        let labels: Vec<u8> = (0..16).map(|i| (i % 3) as u8).collect();
        let logits = Tensor::from_fn(&[1, 3, 4, 4], |i| if (i / 16) as u8 == labels[i % 16] { 20.0 } else { 0.0 });
        let (l, _, _) = eval(&logits, &labels);
        assert!((0.0..1e-4).contains(&l), "{l}");
    }

    #[test]
    fn uniform_logits_give_ln2_cross_entropy() {
        let labels = [0u8, 1, 1, 0, 1, 0, 0, 0];
        let (_, ce, _) = eval(&Tensor::zeros(&[2, 2, 2, 2]), &labels);
        assert!((ce - core::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn dice_term_matches_hand_computation() {
        // one pixel per class, p = softmax([a, 0])
        let a = 1.3f64;
        let logits = Tensor::new(&[1, 2, 1, 2], vec![a, a, 0.0, 0.0]).unwrap();
        let (_, _, dice) = eval(&logits, &[0, 1]);
        let p0 = 1.0 / (1.0 + (-a).exp());
        let p1 = 1.0 - p0;
        let d0 = (2.0 * p0 + DICE_EPS) / (2.0 * p0 + 1.0 + DICE_EPS);
        let d1 = (2.0 * p1 + DICE_EPS) / (2.0 * p1 + 1.0 + DICE_EPS);
        assert!((dice - (1.0 - (d0 + d1) / 2.0)).abs() < 1e-14);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(&Tensor::zeros(&[1, 2, 2, 2]));
        let err = combined_loss(&mut tape, x, &[0, 1, 2, 0]).unwrap_err();
        assert_eq!(err, Error::Label { value: 2, num_classes: 2 });
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = Tensor::from_fn(&[1, 3, 4, 4], |_| rng.random_range(-2.0..2.0));
        let labels: Vec<u8> = (0..16).map(|_| rng.random_range(0..3u8)).collect();
        let coords: Vec<_> = (0..logits.numel()).map(|i| (0, i)).collect();
        let report = gradcheck::check(core::slice::from_ref(&logits), &coords, GradCheckConfig::default(), |tape, v| {
            Ok(combined_loss(tape, v[0], &labels)?.total)
        })
        .unwrap();
        assert!(report.max_rel_err() < 1e-4, "{:?}", report.worst());
    }
}
