//! TC-ResNet style temporal convolution encoder with a GRU head.
//!
//! Activations are kept channel-major as `[channels, batch * time]`
//! matrices (column `b * T + t`), so convolutions become one GEMM per
//! layer over the whole batch and batch norm reduces along rows.

mod checkpoint;
pub mod gradcheck;
mod layers;
mod model;
mod optim;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

pub use checkpoint::{file_sha256, sha256_hex, write_atomic, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use layers::{BatchNorm, Conv1d, Gru, Linear};
pub use model::{stack_features, ConvBn, Encoder, ForwardTrace, Mode, ParamMut, ParamRef, ResBlock};
pub use optim::{adam_step, cosine_lr, AdamState};

use crate::error::{Error, Result};

/// Floating point type the encoder is instantiated with.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + Debug
    + Display
    + Default
    + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;

    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub width_multiplier: usize,
    /// Stem width followed by one width per residual block, before scaling.
    pub base_channels: Vec<usize>,
    pub first_kernel: usize,
    pub block_kernel: usize,
    pub block_strides: Vec<usize>,
    pub gru_hidden: usize,
    pub embed_dim: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 40,
            width_multiplier: 2,
            base_channels: vec![16, 24, 32, 48],
            first_kernel: 3,
            block_kernel: 9,
            block_strides: vec![2, 2, 2],
            gru_hidden: 192,
            embed_dim: 192,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    /// Channel widths after applying the width multiplier.
    pub fn channels(&self) -> Vec<usize> {
        self.base_channels.iter().map(|c| c * self.width_multiplier).collect()
    }

    pub fn n_blocks(&self) -> usize {
        self.base_channels.len().saturating_sub(1)
    }

    /// Shortest input sequence accepted by the encoder.
    pub fn min_frames(&self) -> usize {
        self.block_strides.iter().product::<usize>().max(1)
    }

    /// Time steps left after the residual blocks for an input of `t` frames.
    pub fn output_frames(&self, t: usize) -> usize {
        let pad = self.block_kernel / 2;
        self.block_strides.iter().fold(t, |t, &s| (t + 2 * pad - self.block_kernel) / s + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("encoder: {m}")));
        if self.base_channels.len() < 2 {
            return bad("need a stem width and at least one block width");
        }
        if self.block_strides.len() != self.n_blocks() {
            return bad("block_strides must have one entry per residual block");
        }
        if self.input_dim == 0
            || self.width_multiplier == 0
            || self.gru_hidden == 0
            || self.embed_dim == 0
            || self.base_channels.contains(&0)
            || self.block_strides.contains(&0)
        {
            return bad("all sizes must be positive");
        }
        if self.first_kernel.is_multiple_of(2) || self.block_kernel.is_multiple_of(2) {
            return bad("kernels must be odd");
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("bn_eps must be positive and bn_momentum in [0, 1]");
        }
        Ok(())
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        let ch = self.channels();
        let mut n = ch[0] * self.input_dim * self.first_kernel + 2 * ch[0];
        for (i, w) in ch.windows(2).enumerate() {
            let (cin, cout) = (w[0], w[1]);
            n += cout * cin * self.block_kernel + 2 * cout;
            n += cout * cout * self.block_kernel + 2 * cout;
            if self.block_strides[i] != 1 || cin != cout {
                n += cout * cin + 2 * cout;
            }
        }
        let (h, c) = (self.gru_hidden, *ch.last().expect("validated"));
        n += 3 * h * c + 3 * h * h + 6 * h;
        n + self.embed_dim * h + self.embed_dim
    }
}
