use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Attention problem geometry for one head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttnConfig {
    /// Sequence length N.
    pub seq_len: usize,
    /// Head dimension d.
    pub head_dim: usize,
    /// Square tile edge B (rows of Q and K/V per block).
    pub block: usize,
    /// Checksum group width s.
    pub stride: usize,
    /// Softmax scale applied to the raw scores.
    pub scale: f32,
}

impl AttnConfig {
    pub const DEFAULT_STRIDE: usize = 8;

    /// Validated config with the default scale `1/sqrt(d)`.
    pub fn new(seq_len: usize, head_dim: usize, block: usize, stride: usize) -> Result<Self> {
        let cfg = AttnConfig {
            seq_len,
            head_dim,
            block,
            stride,
            scale: 1.0 / (head_dim as f32).sqrt(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_scale(mut self, scale: f32) -> Self {
        self.scale = scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.head_dim == 0 || self.block == 0 || self.stride == 0 {
            return Err(Error::config("seq_len, head_dim, block and stride must all be positive"));
        }
        if !self.seq_len.is_multiple_of(self.block) {
            return Err(Error::config(format!(
                "block {} does not divide seq_len {}",
                self.block, self.seq_len
            )));
        }
        if !self.block.is_multiple_of(self.stride) {
            return Err(Error::config(format!(
                "stride {} does not divide block {}",
                self.stride, self.block
            )));
        }
        if !self.head_dim.is_multiple_of(self.stride) {
            return Err(Error::config(format!(
                "stride {} does not divide head_dim {}",
                self.stride, self.head_dim
            )));
        }
        if !self.scale.is_finite() || self.scale <= 0.0 {
            return Err(Error::config("scale must be finite and positive"));
        }
        Ok(())
    }

    /// Number of row (and column) blocks n = N / B.
    pub fn num_blocks(&self) -> usize {
        self.seq_len / self.block
    }

    /// Number of strided groups across a protected tile of `width` columns.
    pub fn groups(&self, width: usize) -> usize {
        width / self.stride
    }

    /// Strided loop count `width/s - 1` for a tile of `width` columns.
    pub fn lc_cols(&self, width: usize) -> usize {
        self.groups(width) - 1
    }
}
