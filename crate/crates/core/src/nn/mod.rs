//! The segmentation network: frozen encoder with adapters, temporal
//! aggregation, prompt pooling, decoder and the two prediction heads.

mod decoder;
mod encoder;
mod model;
mod temporal;

pub use decoder::{point_embedding, Decoder, Heads, PromptPool};
pub use encoder::{DeepAdapter, Encoder, ShallowAdapter, ENCODER_SEED};
pub use model::{ForwardOut, Model};
pub use temporal::{time_embedding, Temporal};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Input bands.
    pub channels: usize,
    /// Output classes including class 0.
    pub num_classes: usize,
    /// Encoder feature width `D`.
    pub width: usize,
    pub heads: usize,
    pub latents: usize,
    pub temporal_kernel: usize,
    pub decoder_blocks: usize,
    pub bottleneck_ratio: usize,
    /// Frequency multiplier of the positional embedding of point prompts.
    pub point_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            num_classes: 4,
            width: 32,
            heads: 4,
            latents: 8,
            temporal_kernel: 5,
            decoder_blocks: 2,
            bottleneck_ratio: 4,
            point_scale: 100.0,
        }
    }
}

impl ModelConfig {
    /// Total encoder stride.
    pub const STRIDE: usize = 4;

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::config("model needs >= 1 channel and 2..=255 classes"));
        }
        if self.width == 0 || self.width % 2 != 0 {
            return Err(Error::config(format!("width {} must be even", self.width)));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::config(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.temporal_kernel % 2 == 0 {
            return Err(Error::config("temporal kernel must be odd"));
        }
        if self.latents == 0 || self.bottleneck_ratio == 0 || self.width % self.bottleneck_ratio != 0 {
            return Err(Error::config("invalid latent count or bottleneck ratio"));
        }
        Ok(())
    }

    /// Largest odd kernel not exceeding `t_len` and the configured size.
    pub fn kernel_for(&self, t_len: usize) -> usize {
        let k = self.temporal_kernel.min(t_len.max(1));
        if k % 2 == 0 {
            k - 1
        } else {
            k
        }
    }

    /// Decoder width: trend plus event features.
    pub fn fused_width(&self) -> usize {
        2 * self.width
    }
}

/// Affine layer `x · w + b` with `w: [in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Glorot weights, or all zeros with `zero_init`; bias starts at zero.
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, d_in: usize, d_out: usize, zero_init: bool) -> Self {
        let init = if zero_init {
            Init::Zeros
        } else {
            Init::Glorot {
                fan_in: d_in,
                fan_out: d_out,
            }
        };
        Self {
            w: store.add(&format!("{name}.w"), &[d_in, d_out], init, true),
            b: store.add(&format!("{name}.b"), &[d_out], Init::Zeros, true),
        }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        tape.dense(x, p.var(self.w), p.var(self.b))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gain: ParamId,
    pub offset: ParamId,
}

impl Norm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(&format!("{name}.gain"), &[d], Init::Ones, true),
            offset: store.add(&format!("{name}.offset"), &[d], Init::Zeros, true),
        }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gain), p.var(self.offset))
    }
}

/// Scaled dot-product attention of `q: [n, d]` over `k: [m, d]`, `v: [m, e]`.
pub(crate) fn attend<F: Scalar>(tape: &mut Tape<F>, q: Var, k: Var, v: Var) -> Result<Var> {
    let d = tape.value(q).last_dim();
    let logits = tape.matmul_nt(q, k)?;
    let logits = tape.scale(logits, F::one() / crate::tensor::sc::<F>((d as f64).sqrt()));
    let weights = tape.softmax(logits, 1)?;
    tape.matmul(weights, v)
}
