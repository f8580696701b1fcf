use alloc::format;

use num_traits::Float;

use super::params::{MlstmLayer, MlstmParams};
use crate::nn::{Binding, Init, Linear, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result, Scalar};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockConfig {
    pub dim: usize,
    /// Inner width is `expansion * dim`.
    pub expansion: usize,
    pub num_heads: usize,
    pub conv_kernel: usize,
    pub norm_eps: f64,
    pub zero_init_down_proj: bool,
}

impl BlockConfig {
    pub fn inner_dim(&self) -> usize {
        self.expansion * self.dim
    }

    pub fn head_dim(&self) -> usize {
        self.inner_dim() / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.expansion == 0 || self.conv_kernel == 0 {
            return Err(Error::Config(format!("block dims must be positive: {self:?}")));
        }
        if self.num_heads == 0 || !self.inner_dim().is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "inner width {} is not divisible into {} heads",
                self.inner_dim(),
                self.num_heads
            )));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Parameter(format!("norm eps must be > 0, got {}", self.norm_eps)));
        }
        Ok(())
    }

    /// Closed-form parameter count of one block.
    pub fn param_count(&self) -> usize {
        let (d, di, h, k) = (self.dim, self.inner_dim(), self.num_heads, self.conv_kernel);
        let norm = 2 * d;
        let up = d * 2 * di + 2 * di;
        let conv = di * k + di;
        let cell = 3 * di * di + 2 * (di * h + h) + di * di + di;
        let head_norm = di;
        let down = di * d + d;
        norm + up + conv + cell + head_norm + down
    }
}

/// Residual ViL block over a `[B, T, D]` token sequence.
///
/// `LN → up-projection` splits into a cell path (causal depthwise conv,
/// SiLU, mLSTM, per-head norm) and a SiLU gate; their product is
/// down-projected and added back to the input.
#[derive(Clone, Copy, Debug)]
pub struct VilBlock {
    pub cfg: BlockConfig,
    norm_w: ParamId,
    norm_b: ParamId,
    up: Linear,
    conv_w: ParamId,
    conv_b: ParamId,
    cell: MlstmLayer,
    head_norm_w: ParamId,
    down: Linear,
}

impl VilBlock {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, cfg: BlockConfig) -> Result<Self> {
        cfg.validate()?;
        let (d, di) = (cfg.dim, cfg.inner_dim());
        let norm_w = store.add(format!("{name}.norm.weight"), &[d], Init::Const(1.0));
        let norm_b = store.add(format!("{name}.norm.bias"), &[d], Init::Zeros);
        let up = Linear::new(store, &format!("{name}.up"), d, 2 * di, true, Init::Normal { std: 1.0 / Float::sqrt(d as f64) });
        let conv_w = store.add(
            format!("{name}.conv.weight"),
            &[di, cfg.conv_kernel],
            Init::Normal {
                std: 1.0 / Float::sqrt(cfg.conv_kernel as f64),
            },
        );
        let conv_b = store.add(format!("{name}.conv.bias"), &[di], Init::Zeros);
        let cell = MlstmLayer::new(store, &format!("{name}.cell"), di, cfg.num_heads, cfg.head_dim());
        let head_norm_w = store.add(format!("{name}.head_norm.weight"), &[di], Init::Const(1.0));
        let down_init = if cfg.zero_init_down_proj {
            Init::Zeros
        } else {
            Init::Normal {
                std: 1.0 / Float::sqrt(di as f64),
            }
        };
        let down = Linear::new(store, &format!("{name}.down"), di, d, true, down_init);
        Ok(Self {
            cfg,
            norm_w,
            norm_b,
            up,
            conv_w,
            conv_b,
            cell,
            head_norm_w,
            down,
        })
    }

    /// Standalone copy of the cell weights inside this block.
    pub fn cell_params<S: Scalar>(&self, store: &ParamStore<S>) -> MlstmParams<S> {
        self.cell.params(store)
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, bind: &Binding, x: Var, reverse: bool) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let (b, t) = match *shape.as_slice() {
            [b, t, d] if d == self.cfg.dim => (b, t),
            _ => {
                return Err(Error::dim(
                    "vil_block",
                    format!("expected [B, T, {}], got {shape:?}", self.cfg.dim),
                ))
            }
        };
        if t == 0 {
            return Err(Error::EmptySequence);
        }
        let di = self.cfg.inner_dim();
        let eps = S::lit(self.cfg.norm_eps);
        let x = if reverse { tape.flip(x, 1)? } else { x };

        let u = tape.layer_norm(x, 2, eps)?;
        let u = tape.mul(u, bind.var(self.norm_w))?;
        let u = tape.add(u, bind.var(self.norm_b))?;
        let up = self.up.forward(tape, bind, u)?;
        let a = tape.narrow(up, 2, 0, di)?;
        let z = tape.narrow(up, 2, di, di)?;

        let c = tape.causal_conv1d(a, bind.var(self.conv_w), bind.var(self.conv_b))?;
        let c = tape.silu(c)?;
        let h = self.cell.forward(tape, bind, c)?;
        let (nh, hd) = (self.cfg.num_heads, self.cfg.head_dim());
        let h = tape.reshape(h, &[b, t, nh, hd])?;
        let h = tape.layer_norm(h, 3, eps)?;
        let h = tape.reshape(h, &[b, t, di])?;
        let h = tape.mul(h, bind.var(self.head_norm_w))?;

        let gate = tape.silu(z)?;
        let g = tape.mul(h, gate)?;
        let delta = self.down.forward(tape, bind, g)?;
        let y = tape.add(x, delta)?;
        if reverse {
            tape.flip(y, 1)
        } else {
            Ok(y)
        }
    }

    /// Gradient-free evaluation on `x[T, D]`.
    pub fn apply<S: Scalar>(&self, store: &ParamStore<S>, x: &Tensor<S>, reverse: bool) -> Result<Tensor<S>> {
        let shape = x.shape();
        if shape.len() != 2 {
            return Err(Error::dim("vil_block", format!("expected [T, D], got {shape:?}")));
        }
        let mut tape = Tape::inference();
        let bind = store.bind_frozen(&mut tape);
        let xv = tape.constant(&x.reshape(&[1, shape[0], shape[1]])?);
        let y = self.forward(&mut tape, &bind, xv, reverse)?;
        tape.tensor(y).reshape(shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{self, GradCheckConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(dim: usize, zero: bool) -> BlockConfig {
        BlockConfig {
            dim,
            expansion: 2,
            num_heads: 2,
            conv_kernel: 4,
            norm_eps: 1e-5,
            zero_init_down_proj: zero,
        }
    }

    fn tokens(seed: u64, t: usize, d: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[t, d], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_down_projection_is_identity() {
        let mut store = ParamStore::<f64>::new(1);
        let blk = VilBlock::new(&mut store, "b", cfg(8, true)).unwrap();
        let x = tokens(2, 11, 8);
        for reverse in [false, true] {
            assert_eq!(blk.apply(&store, &x, reverse).unwrap(), x);
        }
    }

    #[test]
    fn shape_is_preserved() {
        let mut store = ParamStore::<f64>::new(1);
        let blk = VilBlock::new(&mut store, "b", cfg(4, false)).unwrap();
        for t in [1, 2, 5, 17] {
            let x = tokens(t as u64, t, 4);
            assert_eq!(blk.apply(&store, &x, false).unwrap().shape(), &[t, 4]);
        }
    }

    #[test]
    fn param_count_matches_store() {
        let mut store = ParamStore::<f32>::new(1);
        let c = cfg(6, false);
        VilBlock::new(&mut store, "b", c).unwrap();
        assert_eq!(store.numel(), c.param_count());
    }

    #[test]
    fn reverse_equals_flipped_forward() {
        let mut store = ParamStore::<f64>::new(3);
        let blk = VilBlock::new(&mut store, "b", cfg(4, false)).unwrap();
        let x = tokens(4, 6, 4);
        let flip = |t: &Tensor<f64>| {
            let (n, d) = (t.shape()[0], t.shape()[1]);
            Tensor::from_fn(&[n, d], |i| t.data()[(n - 1 - i / d) * d + i % d])
        };
        let a = blk.apply(&store, &x, true).unwrap();
        let b = flip(&blk.apply(&store, &flip(&x), false).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut store = ParamStore::<f64>::new(5);
        let blk = VilBlock::new(&mut store, "b", cfg(8, false)).unwrap();
        let x = tokens(6, 8, 8).reshape(&[1, 8, 8]).unwrap();
        let coords: alloc::vec::Vec<_> = (0..x.numel()).map(|i| (0, i)).collect();
        for reverse in [false, true] {
            let report = gradcheck::check(core::slice::from_ref(&x), &coords, GradCheckConfig::default(), |tape, v| {
                let bind = store.bind_frozen(tape);
                let y = blk.forward(tape, &bind, v[0], reverse)?;
                tape.mean(y)
            })
            .unwrap();
            assert!(report.max_rel_err() < 1e-4, "{:?}", report.worst());
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut store = ParamStore::<f64>::new(8);
        let blk = VilBlock::new(&mut store, "b", cfg(4, false)).unwrap();
        let x = tokens(1, 6, 4).reshape(&[1, 6, 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Tensor::from_fn(&[1, 6, 4], |_| rng.random_range(-1.0..1.0));
        let mut inputs = store.tensors();
        let np = inputs.len();
        inputs.push(x);
        inputs.push(w);
        let coords = gradcheck::sample_coords(&inputs[..np], 150, 3);
        let report = gradcheck::check(&inputs, &coords, GradCheckConfig::default(), |tape, v| {
            let bind = Binding::from_vars(v[..np].to_vec());
            let y = blk.forward(tape, &bind, v[np], false)?;
            let y = tape.mul(y, v[np + 1])?;
            tape.sum(y)
        })
        .unwrap();
        assert!(report.max_rel_err() < 1e-4, "{:?}", report.worst());
    }
}
