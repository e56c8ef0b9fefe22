use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RenormSchedule;

/// Positional treatment of the encoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosScheme {
    /// Absolute sine/cosine table added once after subsampling.
    Sinusoidal,
    /// No positional information.
    None,
    /// Query/key rotation inside every attention layer.
    #[default]
    Rotary,
}

/// Architectural hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub conv_kernel: usize,
    pub subsample_hidden: usize,
    pub subsample_factor: usize,
    /// Time extent of each subsampling kernel. 3 overlaps neighbouring
    /// frames; 2 makes every encoder frame depend only on its own 8 mel frames.
    pub subsample_time_kernel: usize,
    pub pos_scheme: PosScheme,
    pub rotary_theta: f64,
    /// Vocabulary size including blank.
    pub vocab_size: usize,
    pub ff_expansion: usize,
    pub attention_chunk: usize,
    /// Feed intermediate posteriors back into the hidden stream.
    pub self_conditioning: bool,
    pub conv_module: bool,
    pub self_attention: bool,
    pub renorm: RenormSchedule,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_layers: 3,
            d_model: 128,
            n_heads: 4,
            conv_kernel: 9,
            subsample_hidden: 256,
            subsample_factor: 8,
            subsample_time_kernel: 3,
            pos_scheme: PosScheme::Rotary,
            rotary_theta: 1.5e6,
            vocab_size: 32,
            ff_expansion: 4,
            attention_chunk: 512,
            self_conditioning: true,
            conv_module: true,
            self_attention: true,
            renorm: RenormSchedule::default(),
        }
    }
}

impl EncoderConfig {
    /// Six layers, width 768, six heads, 4095 tokens plus blank.
    pub fn full_scale() -> Self {
        Self {
            n_layers: 6,
            d_model: 768,
            n_heads: 6,
            vocab_size: 4096,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 {
            return fail("n_layers, d_model and n_heads must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.pos_scheme == PosScheme::Rotary && !self.head_dim().is_multiple_of(2) {
            return fail(format!(
                "rotary encoding needs an even head dimension, got {}",
                self.head_dim()
            ));
        }
        if self.pos_scheme == PosScheme::Sinusoidal && !self.d_model.is_multiple_of(2) {
            return fail(format!(
                "sinusoidal encoding needs an even d_model, got {}",
                self.d_model
            ));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return fail(format!("conv_kernel must be odd, got {}", self.conv_kernel));
        }
        if self.subsample_factor != 8 {
            return fail(format!("subsample_factor must be 8, got {}", self.subsample_factor));
        }
        if !(2..=3).contains(&self.subsample_time_kernel) {
            return fail(format!(
                "subsample_time_kernel must be 2 or 3, got {}",
                self.subsample_time_kernel
            ));
        }
        if self.subsample_hidden == 0 || self.ff_expansion == 0 || self.attention_chunk == 0 {
            return fail("subsample_hidden, ff_expansion and attention_chunk must be positive".into());
        }
        if self.vocab_size < 2 {
            return fail("vocab_size must include at least one token and blank".into());
        }
        if !(self.rotary_theta > 1.0) {
            return fail(format!("rotary_theta must exceed 1, got {}", self.rotary_theta));
        }
        Ok(())
    }
}
