use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Numeric precision tag. Computation always runs in `f64`; with `F32` the
/// parameters and cached keys/values are rounded to `f32`-representable
/// values so they can be stored and shipped at half the width without loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Dtype::F32 => x as f32 as f64,
            Dtype::F64 => x,
        }
    }

    pub fn round_slice(self, xs: &mut [f64]) {
        if self == Dtype::F32 {
            for x in xs {
                *x = *x as f32 as f64;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    /// Hidden width of the MLP.
    pub d_ff: usize,
    pub vocab: usize,
    pub max_seq: usize,
    #[serde(default)]
    pub dtype: Dtype,
}

impl ModelConfig {
    /// Heads and MLP width derived from `d_model` (`d_ff = 2·d_model`).
    pub fn new(
        n_blocks: usize,
        d_model: usize,
        n_heads: usize,
        vocab: usize,
        max_seq: usize,
    ) -> Self {
        Self {
            n_blocks,
            d_model,
            n_heads,
            head_dim: d_model.checked_div(n_heads).unwrap_or(0),
            d_ff: 2 * d_model,
            vocab,
            max_seq,
            dtype: Dtype::F64,
        }
    }

    /// The shipped toy model: 10 blocks, width 16, two heads, 32 tokens.
    pub fn toy() -> Self {
        Self::new(10, 16, 2, 32, 64)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_blocks < 1 {
            return fail("n_blocks must be at least 1".into());
        }
        if self.n_heads == 0 || self.head_dim == 0 {
            return fail("n_heads and head_dim must be positive".into());
        }
        if self.d_model != self.n_heads * self.head_dim {
            return fail(format!(
                "d_model {} != n_heads {} * head_dim {}",
                self.d_model, self.n_heads, self.head_dim
            ));
        }
        if self.vocab < 2 {
            return fail(format!("vocab must be at least 2, got {}", self.vocab));
        }
        if self.max_seq < 2 {
            return fail(format!("max_seq must be at least 2, got {}", self.max_seq));
        }
        if self.d_ff == 0 {
            return fail("d_ff must be positive".into());
        }
        if self.n_blocks > u16::MAX as usize || self.vocab > u32::MAX as usize {
            return fail("dimensions exceed the checkpoint format".into());
        }
        Ok(())
    }
}
