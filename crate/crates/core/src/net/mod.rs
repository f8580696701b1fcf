//! The U-shaped segmentation network.

mod config;

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;

pub use config::NetworkConfig;

use crate::mlstm::VilBlock;
use crate::nn::{Binding, Init, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result, Scalar};

/// Convolution (no bias) → instance norm with affine → LeakyReLU.
#[derive(Clone, Copy, Debug)]
struct ConvNorm {
    weight: ParamId,
    gamma: ParamId,
    beta: ParamId,
    transposed: bool,
    stride: usize,
    padding: usize,
}

impl ConvNorm {
    fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, cin: usize, cout: usize, k: usize, stride: usize, transposed: bool) -> Self {
        let fan_in = (cin * k * k) as f64;
        let std = Float::sqrt(2.0 / fan_in);
        let shape = if transposed { [cin, cout, k, k] } else { [cout, cin, k, k] };
        Self {
            weight: store.add(format!("{name}.conv.weight"), &shape, Init::Normal { std }),
            gamma: store.add(format!("{name}.norm.weight"), &[cout, 1, 1], Init::Const(1.0)),
            beta: store.add(format!("{name}.norm.bias"), &[cout, 1, 1], Init::Zeros),
            transposed,
            stride,
            padding: if transposed { 0 } else { (k - 1) / 2 * (stride == 1) as usize },
        }
    }

    fn forward<S: Scalar>(&self, tape: &mut Tape<S>, bind: &Binding, x: Var, eps: S, slope: S) -> Result<Var> {
        let w = bind.var(self.weight);
        let y = if self.transposed {
            tape.conv_transpose2d(x, w, None, self.stride)?
        } else {
            tape.conv2d(x, w, None, self.stride, self.padding)?
        };
        let y = tape.instance_norm(y, eps)?;
        let y = tape.mul(y, bind.var(self.gamma))?;
        let y = tape.add(y, bind.var(self.beta))?;
        tape.leaky_relu(y, slope)
    }
}

/// Alternating-direction ViL blocks over the row-major pixel sequence of a
/// `[B, C, H, W]` feature map.
#[derive(Clone, Debug)]
pub struct VilStage {
    pub blocks: Vec<VilBlock>,
}

impl VilStage {
    /// Runs the blocks on `[B, T, C]` tokens. Block `j` scans backwards when
    /// `j` is odd, or when `j` is even if `flip_directions` is set.
    pub fn forward_tokens<S: Scalar>(&self, tape: &mut Tape<S>, bind: &Binding, tokens: Var, flip_directions: bool) -> Result<Var> {
        let mut t = tokens;
        for (j, blk) in self.blocks.iter().enumerate() {
            t = blk.forward(tape, bind, t, (j % 2 == 1) ^ flip_directions)?;
        }
        Ok(t)
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, bind: &Binding, f: Var) -> Result<Var> {
        if self.blocks.is_empty() {
            return Ok(f);
        }
        let [b, c, h, w] = match *tape.shape(f) {
            [b, c, h, w] => [b, c, h, w],
            ref s => return Err(Error::dim("vil_stage", format!("expected [B, C, H, W], got {s:?}"))),
        };
        let t = tape.permute(f, &[0, 2, 3, 1])?;
        let t = tape.reshape(t, &[b, h * w, c])?;
        let t = self.forward_tokens(tape, bind, t, false)?;
        let t = tape.reshape(t, &[b, h, w, c])?;
        tape.permute(t, &[0, 3, 1, 2])
    }
}

/// Output of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Encoder outputs `S_0 .. S_{L-2}` followed by the bottleneck.
    pub pyramid: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct VilUNet {
    cfg: NetworkConfig,
    stem: ConvNorm,
    encoder: Vec<VilStage>,
    down: Vec<ConvNorm>,
    bottleneck: VilStage,
    up: Vec<ConvNorm>,
    decoder: Vec<VilStage>,
    head_w: ParamId,
    head_b: ParamId,
}

impl VilUNet {
    /// Registers every parameter in `store`. Parameter names are stable,
    /// so networks differing only in block count share their convolution
    /// weights for the same store seed.
    pub fn new<S: Scalar>(cfg: NetworkConfig, store: &mut ParamStore<S>) -> Result<Self> {
        cfg.validate()?;
        let l = cfg.num_stages;
        let stage = |store: &mut ParamStore<S>, name: &str, s: usize| -> Result<VilStage> {
            let blocks = (0..cfg.vil_blocks_per_stage)
                .map(|j| VilBlock::new(store, &format!("{name}.block{j}"), cfg.block_config(s)))
                .collect::<Result<_>>()?;
            Ok(VilStage { blocks })
        };
        let stem = ConvNorm::new(store, "stem", cfg.in_channels, cfg.base_channels, cfg.stem_kernel, 1, false);
        let mut encoder = Vec::new();
        let mut down = Vec::new();
        for s in 0..l - 1 {
            let c = cfg.stage_channels(s);
            encoder.push(stage(store, &format!("enc{s}"), s)?);
            down.push(ConvNorm::new(store, &format!("down{s}"), c, 2 * c, cfg.sampler_kernel, 2, false));
        }
        let bottleneck = stage(store, "bottleneck", l - 1)?;
        let mut up = Vec::new();
        let mut decoder = Vec::new();
        for s in 0..l - 1 {
            let c = cfg.stage_channels(s);
            up.push(ConvNorm::new(store, &format!("up{s}"), 2 * c, c, cfg.sampler_kernel, 2, true));
            decoder.push(stage(store, &format!("dec{s}"), s)?);
        }
        let c0 = cfg.base_channels;
        let head_w = store.add(
            "head.weight",
            &[cfg.num_classes, c0, 1, 1],
            Init::Normal {
                std: Float::sqrt(1.0 / c0 as f64),
            },
        );
        let head_b = store.add("head.bias", &[cfg.num_classes], Init::Zeros);
        Ok(Self {
            cfg,
            stem,
            encoder,
            down,
            bottleneck,
            up,
            decoder,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn encoder_stage(&self, s: usize) -> &VilStage {
        &self.encoder[s]
    }

    fn consts<S: Scalar>(&self) -> (S, S) {
        (S::lit(self.cfg.norm_eps), S::lit(self.cfg.leaky_relu_slope))
    }

    pub fn stem<S: Scalar>(&self, tape: &mut Tape<S>, bind: &Binding, x: Var) -> Result<Var> {
        self.cfg.check_input(tape.shape(x))?;
        let (eps, slope) = self.consts();
        self.stem.forward(tape, bind, x, eps, slope)
    }

    /// Stride-2 sampler after encoder stage `s`.
    pub fn downsample<S: Scalar>(&self, tape: &mut Tape<S>, bind: &Binding, s: usize, f: Var) -> Result<Var> {
        let shape = tape.shape(f);
        if shape.len() != 4 || !shape[2].is_multiple_of(2) || !shape[3].is_multiple_of(2) {
            return Err(Error::Config(format!("downsample needs even extents, got {shape:?}")));
        }
        let (eps, slope) = self.consts();
        self.down[s].forward(tape, bind, f, eps, slope)
    }

    /// Up-samples decoder features into stage `s` and adds the skip.
    pub fn upsample_and_fuse<S: Scalar>(&self, tape: &mut Tape<S>, bind: &Binding, s: usize, f_dec: Var, skip: Var) -> Result<Var> {
        let (eps, slope) = self.consts();
        let u = self.up[s].forward(tape, bind, f_dec, eps, slope)?;
        if tape.shape(u) != tape.shape(skip) {
            return Err(Error::dim(
                "upsample_and_fuse",
                format!("upsampled {:?} vs skip {:?}", tape.shape(u), tape.shape(skip)),
            ));
        }
        tape.add(u, skip)
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, bind: &Binding, x: Var) -> Result<ForwardOutput> {
        let l = self.cfg.num_stages;
        let mut f = self.stem(tape, bind, x)?;
        let mut pyramid = Vec::with_capacity(l);
        for s in 0..l - 1 {
            f = self.encoder[s].forward(tape, bind, f)?;
            pyramid.push(f);
            f = self.downsample(tape, bind, s, f)?;
        }
        f = self.bottleneck.forward(tape, bind, f)?;
        pyramid.push(f);
        for s in (0..l - 1).rev() {
            f = self.upsample_and_fuse(tape, bind, s, f, pyramid[s])?;
            f = self.decoder[s].forward(tape, bind, f)?;
        }
        let logits = tape.conv2d(f, bind.var(self.head_w), Some(bind.var(self.head_b)), 1, 0)?;
        Ok(ForwardOutput { logits, pyramid })
    }

    /// Gradient-free logits for `x[B, C, H, W]`.
    pub fn logits<S: Scalar>(&self, store: &ParamStore<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::inference();
        let bind = store.bind_frozen(&mut tape);
        let xv = tape.constant(x);
        let out = self.forward(&mut tape, &bind, xv)?;
        Ok(tape.tensor(out.logits))
    }

    /// Per-pixel class probabilities.
    pub fn predict_proba<S: Scalar>(&self, store: &ParamStore<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::inference();
        let bind = store.bind_frozen(&mut tape);
        let xv = tape.constant(x);
        let out = self.forward(&mut tape, &bind, xv)?;
        let p = tape.softmax(out.logits, 1)?;
        Ok(tape.tensor(p))
    }

    /// Arg-max class per pixel, `[B, H, W]` flattened row-major.
    pub fn predict_labels<S: Scalar>(&self, store: &ParamStore<S>, x: &Tensor<S>) -> Result<Vec<u8>> {
        let logits = self.logits(store, x)?;
        Ok(argmax_channels(&logits))
    }
}

/// Arg-max over axis 1 of `[B, K, spatial...]`; ties go to the lower class.
pub fn argmax_channels<S: Scalar>(logits: &Tensor<S>) -> Vec<u8> {
    let shape = logits.shape();
    let (b, k) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    let d = logits.data();
    let mut out = Vec::with_capacity(b * inner);
    for bi in 0..b {
        for i in 0..inner {
            let mut best = 0;
            for c in 1..k {
                if d[(bi * k + c) * inner + i] > d[(bi * k + best) * inner + i] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    out
}
