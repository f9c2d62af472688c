use crate::error::{Error, Result};

/// Normalization guard added to every score-row denominator.
pub const DEFAULT_EPSILON: f32 = 1e-10;

/// Pipeline hyperparameters.
///
/// Defaults: 128-token blocks, α = 0.12, 256 sink tokens, 512 window tokens,
/// τ = d^(−1/2).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub block_size: usize,
    /// Fraction of the row-maximum score a block must reach to be kept.
    pub alpha: f32,
    pub sink_tokens: usize,
    pub window_tokens: usize,
    /// Softmax temperature; `None` means `1/sqrt(head_dim)`.
    pub scale: Option<f32>,
    pub epsilon: f32,
    pub rng_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            block_size: 128,
            alpha: 0.12,
            sink_tokens: 256,
            window_tokens: 512,
            scale: None,
            epsilon: DEFAULT_EPSILON,
            rng_seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 {
            return Err(Error::config("block size must be >= 1"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.window_tokens == 0 {
            return Err(Error::config(
                "window must cover at least one token so the diagonal block is kept",
            ));
        }
        if let Some(scale) = self.scale {
            if !(scale > 0.0 && scale.is_finite()) {
                return Err(Error::config(format!("scale must be > 0, got {scale}")));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        Ok(())
    }

    pub fn scale_for(&self, head_dim: usize) -> f32 {
        self.scale.unwrap_or_else(|| default_scale(head_dim))
    }

    pub fn sink_blocks(&self) -> usize {
        self.sink_tokens.div_ceil(self.block_size)
    }

    pub fn window_blocks(&self) -> usize {
        self.window_tokens.div_ceil(self.block_size)
    }
}

pub fn default_scale(head_dim: usize) -> f32 {
    1.0 / (head_dim as f32).sqrt()
}
