//! The 64-bit finite-difference suite behind `vilu gradcheck`.

use vilu_core::data::{clip_normalize, synth_case, SynthConfig};
use vilu_core::loss::combined_loss;
use vilu_core::net::{NetworkConfig, VilUNet};
use vilu_core::nn::{Binding, ParamStore};
use vilu_core::tensor::gradcheck::{check_sampled, GradCheckConfig, GradCheckReport};
use vilu_core::tensor::Tensor;

use crate::Result;

pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl CheckOutcome {
    pub fn max_rel_err(&self) -> f64 {
        self.report.max_rel_err_smooth()
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < TOLERANCE
    }

    pub fn summary(&self) -> String {
        let worst = self
            .report
            .worst_smooth()
            .map(|p| format!(" worst input {} index {}: analytic {:.6e} numeric {:.6e}", p.input, p.index, p.analytic, p.numeric))
            .unwrap_or_default();
        format!(
            "{}: {} probes, max rel err {:.3e} (tolerance {TOLERANCE:e}), {} kink-straddling probes replaced{worst}",
            self.name,
            self.report.smooth().count(),
            self.max_rel_err(),
            self.report.crossed()
        )
    }
}

/// A `side`×`side` synthetic case, clip-normalised, for a one-sample batch.
fn probe_case(net: &NetworkConfig, seed: u64, side: usize) -> Result<(Tensor<f64>, Vec<u8>)> {
    let cfg = SynthConfig {
        seed,
        n_cases: 1,
        shape: vec![side, side],
        num_classes: net.num_classes,
        ..Default::default()
    };
    let s = synth_case(&cfg, 0)?;
    let x = clip_normalize(&s.image).to_tensor::<f64>();
    Ok((x, s.label.data))
}

/// Loss gradient of a randomly initialised network, on `probes` sampled
/// parameters and `probes` sampled input pixels.
pub fn run_suite(net_cfg: &NetworkConfig, seed: u64, probes: usize, side: usize) -> Result<Vec<CheckOutcome>> {
    let mut store = ParamStore::<f64>::new(seed);
    let net = VilUNet::new(net_cfg.clone(), &mut store)?;
    let (x, labels) = probe_case(net_cfg, seed, side)?;
    let params = store.tensors();
    let cfg = GradCheckConfig::default();

    let by_param = check_sampled(&params, probes, seed ^ 0x9e37, cfg, |tape, v| {
        let bind = Binding::from_vars(v.to_vec());
        let xv = tape.constant(&x);
        let out = net.forward(tape, &bind, xv)?;
        Ok(combined_loss(tape, out.logits, &labels)?.total)
    })?;
    let by_input = check_sampled(std::slice::from_ref(&x), probes.min(x.numel()), seed ^ 0x7f4a, cfg, |tape, v| {
        let bind = store.bind_frozen(tape);
        let out = net.forward(tape, &bind, v[0])?;
        Ok(combined_loss(tape, out.logits, &labels)?.total)
    })?;
    Ok(vec![
        CheckOutcome {
            name: "parameters",
            report: by_param,
        },
        CheckOutcome {
            name: "input",
            report: by_input,
        },
    ])
}
