use alloc::format;

use serde::{Deserialize, Serialize};

use crate::mlstm::BlockConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Stem output width; stage `l` has `base_channels << l` channels.
    pub base_channels: usize,
    pub num_stages: usize,
    pub vil_blocks_per_stage: usize,
    /// mLSTM heads in every block. Head width is `expansion * C / num_heads`.
    pub num_heads: usize,
    pub expansion: usize,
    /// Width of the depthwise causal convolution inside each block.
    pub token_conv_kernel: usize,
    pub stem_kernel: usize,
    pub sampler_kernel: usize,
    pub leaky_relu_slope: f64,
    pub norm_eps: f64,
    pub spatial_rank: usize,
    pub zero_init_down_proj: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 2,
            base_channels: 16,
            num_stages: 4,
            vil_blocks_per_stage: 2,
            num_heads: 4,
            expansion: 2,
            token_conv_kernel: 4,
            stem_kernel: 3,
            sampler_kernel: 2,
            leaky_relu_slope: 0.01,
            norm_eps: 1e-5,
            spatial_rank: 2,
            zero_init_down_proj: false,
        }
    }
}

impl NetworkConfig {
    /// Small two-stage network used for fast checks. A single head keeps the
    /// per-head norm over 8 channels rather than 4.
    pub fn tiny() -> Self {
        Self {
            base_channels: 4,
            num_stages: 2,
            num_heads: 1,
            ..Self::default()
        }
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    /// Spatial extents must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.num_stages - 1)
    }

    pub fn block_config(&self, stage: usize) -> BlockConfig {
        BlockConfig {
            dim: self.stage_channels(stage),
            expansion: self.expansion,
            num_heads: self.num_heads,
            conv_kernel: self.token_conv_kernel,
            norm_eps: self.norm_eps,
            zero_init_down_proj: self.zero_init_down_proj,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::Config(m));
        if self.in_channels == 0 || self.base_channels == 0 {
            return bad(format!(
                "in_channels and base_channels must be >= 1 (got {}, {})",
                self.in_channels, self.base_channels
            ));
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.num_stages < 2 || self.num_stages > 16 {
            return bad(format!("num_stages must be in [2, 16], got {}", self.num_stages));
        }
        if !self.vil_blocks_per_stage.is_multiple_of(2) {
            return bad(format!(
                "vil_blocks_per_stage must be even, got {}",
                self.vil_blocks_per_stage
            ));
        }
        if self.stem_kernel.is_multiple_of(2) {
            return bad(format!("stem_kernel must be odd, got {}", self.stem_kernel));
        }
        if self.sampler_kernel != 2 {
            return bad(format!("sampler_kernel must be 2, got {}", self.sampler_kernel));
        }
        if self.spatial_rank != 2 {
            return bad(format!("spatial_rank {} is not supported (2-D only)", self.spatial_rank));
        }
        if !(self.leaky_relu_slope.is_finite() && self.leaky_relu_slope >= 0.0) {
            return bad(format!("leaky_relu_slope must be finite and >= 0, got {}", self.leaky_relu_slope));
        }
        if self.vil_blocks_per_stage > 0 {
            for s in 0..self.num_stages {
                self.block_config(s).validate()?;
            }
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Parameter(format!("norm_eps must be > 0, got {}", self.norm_eps)));
        }
        Ok(())
    }

    /// Checks that `[B, C, H, W]` is a valid network input.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = match *shape {
            [b, c, h, w] if b > 0 => [b, c, h, w],
            _ => return Err(Error::dim("vilu_net", format!("expected [B, C, H, W], got {shape:?}"))),
        };
        if c != self.in_channels {
            return Err(Error::dim(
                "vilu_net",
                format!("input has {c} channels, network expects {}", self.in_channels),
            ));
        }
        let k = self.divisor();
        for (name, e) in [("height", h), ("width", w)] {
            if e == 0 || e % k != 0 {
                return Err(Error::Config(format!(
                    "{name} {e} is not divisible by 2^(num_stages-1) = {k}"
                )));
            }
        }
        Ok(())
    }

    /// Closed-form number of trainable scalars.
    pub fn param_count(&self) -> usize {
        let c0 = self.base_channels;
        let ks = self.stem_kernel * self.stem_kernel;
        let kp = self.sampler_kernel * self.sampler_kernel;
        let stem = self.in_channels * c0 * ks + 2 * c0;
        let mut total = stem;
        let blocks = |s: usize| self.vil_blocks_per_stage * self.block_config(s).param_count();
        for l in 0..self.num_stages - 1 {
            let c = self.stage_channels(l);
            // encoder stage + down sampler to 2c
            total += blocks(l) + c * 2 * c * kp + 2 * 2 * c;
            // up sampler from 2c + decoder stage
            total += 2 * c * c * kp + 2 * c + blocks(l);
        }
        total += blocks(self.num_stages - 1);
        total += c0 * self.num_classes + self.num_classes;
        total
    }
}
