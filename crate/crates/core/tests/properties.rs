use proptest::prelude::*;
use vilu_core::data::{synth_dataset, SynthConfig};
use vilu_core::loss::combined_loss;
use vilu_core::metrics::dsc_iou_masks;
use vilu_core::mlstm::{head_sequence, head_sequence_chunked, HeadState};
use vilu_core::net::{NetworkConfig, VilUNet};
use vilu_core::nn::{Init, ParamStore};
use vilu_core::tensor::{Tape, Tensor};
use vilu_core::train::{adam_step, AdamConfig, AdamState, EpochSummary, TrainConfig, TrainObserver, Trainer};
use vilu_core::Error;

fn seq(t: usize, d: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec(-1.0f64..1.0, t * d),
        prop::collection::vec(-0.35f64..0.35, t * d),
        prop::collection::vec(-1.0f64..1.0, t * d),
        prop::collection::vec(-5.0f64..5.0, t),
        prop::collection::vec(-5.0f64..5.0, t),
    )
}

/// Literal `C_t q_t` with exponential gates, no normalisation.
fn literal_cq(q: &[f64], k: &[f64], v: &[f64], ig: &[f64], fg: &[f64], d: usize) -> Vec<f64> {
    let mut c = vec![0.0; d * d];
    let mut out = Vec::new();
    for t in 0..ig.len() {
        let (i, f) = (ig[t].exp(), fg[t].exp());
        for r in 0..d {
            for j in 0..d {
                c[r * d + j] = f * c[r * d + j] + i * v[t * d + r] * k[t * d + j];
            }
        }
        for r in 0..d {
            out.push((0..d).map(|j| c[r * d + j] * q[t * d + j]).sum::<f64>());
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn readout_never_exceeds_unnormalised_numerator((q, k, v, ig, fg) in seq(12, 4)) {
        let h = head_sequence(&q, &k, &v, &ig, &fg, &mut HeadState::new(4)).unwrap();
        let cq = literal_cq(&q, &k, &v, &ig, &fg, 4);
        for (a, b) in h.iter().zip(&cq) {
            prop_assert!(a.abs() <= b.abs() * (1.0 + 1e-9) + 1e-12);
        }
    }

    #[test]
    fn chunked_equals_sequential((q, k, v, ig, fg) in seq(20, 4), chunk in 1usize..25) {
        let a = head_sequence(&q, &k, &v, &ig, &fg, &mut HeadState::new(4)).unwrap();
        let b = head_sequence_chunked(&q, &k, &v, &ig, &fg, chunk, &mut HeadState::new(4)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn combined_loss_is_non_negative(logits in prop::collection::vec(-30.0f64..30.0, 3 * 8), labels in prop::collection::vec(0u8..3, 8)) {
        let mut tape = Tape::inference();
        let x = tape.constant(&Tensor::new(&[1, 3, 2, 4], logits).unwrap());
        let t = combined_loss(&mut tape, x, &labels).unwrap();
        let l = tape.item(t.total);
        prop_assert!(l.is_finite() && l >= 0.0);
        prop_assert!(tape.item(t.dice) >= 0.0);
    }

    #[test]
    fn dsc_iou_identity(a in prop::collection::vec(any::<bool>(), 64), b in prop::collection::vec(any::<bool>(), 64)) {
        let (d, i) = dsc_iou_masks(&a, &b).unwrap();
        prop_assert!((d - 2.0 * i / (1.0 + i)).abs() < 1e-12);
        prop_assert!(i <= d);
    }

    #[test]
    fn adam_first_step_scales_with_lr(g in prop::collection::vec(-10.0f64..10.0, 1..16), e in -4i32..5) {
        let c = 2f64.powi(e);
        let run = |lr: f64| {
            let mut s = ParamStore::<f64>::new(0);
            let id = s.add("w", &[g.len()], Init::Zeros);
            s.get_mut(id).accumulate_grad(&g).unwrap();
            let mut st = AdamState::new(&s);
            adam_step(&mut s, &mut st, &AdamConfig { lr, ..AdamConfig::default() }).unwrap();
            s.get(id).data().to_vec()
        };
        let (a, b) = (run(0.005), run(0.005 * c));
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(x * c, *y);
        }
    }

    #[test]
    fn matmul_shape_algebra_is_total(m in 1usize..5, k1 in 1usize..5, k2 in 1usize..5, n in 1usize..5) {
        let mut tape = Tape::<f64>::inference();
        let a = tape.constant(&Tensor::zeros(&[m, k1]));
        let b = tape.constant(&Tensor::zeros(&[k2, n]));
        match tape.matmul(a, b) {
            Ok(y) => {
                prop_assert_eq!(k1, k2);
                prop_assert_eq!(tape.shape(y), &[m, n]);
            }
            Err(e) => {
                prop_assert!(k1 != k2);
                let is_dimension = matches!(e, Error::Dimension { .. });
                prop_assert!(is_dimension);
            }
        }
    }

    #[test]
    fn broadcast_add_shape_algebra_is_total(a in prop::collection::vec(1usize..4, 1..4), b in prop::collection::vec(1usize..4, 1..4)) {
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(&Tensor::zeros(&a));
        let y = tape.constant(&Tensor::zeros(&b));
        let r = a.len().max(b.len());
        let pad = |s: &[usize]| -> Vec<usize> { std::iter::repeat_n(1, r - s.len()).chain(s.iter().copied()).collect() };
        let (pa, pb) = (pad(&a), pad(&b));
        let ok = pa.iter().zip(&pb).all(|(p, q)| p == q || *p == 1 || *q == 1);
        match tape.add(x, y) {
            Ok(z) => {
                prop_assert!(ok);
                let want: Vec<usize> = pa.iter().zip(&pb).map(|(p, q)| *p.max(q)).collect();
                prop_assert_eq!(tape.shape(z), want.as_slice());
            }
            Err(e) => {
                prop_assert!(!ok);
                let is_dimension = matches!(e, Error::Dimension { .. });
                prop_assert!(is_dimension);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn pyramid_shapes_for_any_valid_config(stages in 2usize..5, base in 1usize..5, hm in 1usize..3, wm in 1usize..3) {
        let cfg = NetworkConfig { num_stages: stages, base_channels: 2 * base, num_heads: 1, vil_blocks_per_stage: 2, ..NetworkConfig::default() };
        let mut store = ParamStore::<f32>::new(1);
        let net = VilUNet::new(cfg.clone(), &mut store).unwrap();
        prop_assert_eq!(store.numel(), cfg.param_count());
        let div = 1usize << (stages - 1);
        let (h, w) = (hm * div, wm * div);
        let mut tape = Tape::inference();
        let bind = store.bind_frozen(&mut tape);
        let x = tape.constant(&Tensor::full(&[1, 1, h, w], 0.5));
        let out = net.forward(&mut tape, &bind, x).unwrap();
        for (l, &f) in out.pyramid.iter().enumerate() {
            let want = [1, (2 * base) << l, h >> l, w >> l];
            prop_assert_eq!(tape.shape(f), &want);
        }
        prop_assert_eq!(tape.shape(out.logits), &[1, 2, h, w]);
    }
}

#[test]
fn training_loss_is_finite_at_every_step_in_f64() {
    let data = synth_dataset(&SynthConfig {
        n_cases: 4,
        shape: vec![16, 16],
        seed: 11,
        ..SynthConfig::default()
    })
    .unwrap();
    struct Check(usize);
    impl TrainObserver<f64> for Check {
        fn on_epoch_end(&mut self, _: &Trainer<f64>, s: &EpochSummary) -> vilu_core::Result<()> {
            assert!(s.steps.iter().all(|r| r.loss.is_finite()));
            self.0 += s.steps.len();
            Ok(())
        }
    }
    let mut t = Trainer::<f64>::new(NetworkConfig::tiny(), TrainConfig { epochs: 3, ..TrainConfig::default() }).unwrap();
    let mut c = Check(0);
    t.fit(&data, &[], &Default::default(), &mut c).unwrap();
    assert_eq!(c.0, 6);
}
