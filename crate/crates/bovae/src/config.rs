//! Model hyperparameters shared across training stages.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the encoder turns per-token vectors into the latent bag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BottleneckMode {
    /// One vector per surviving token, selected by learned gates.
    Bov,
    /// Mean of the last encoder layer: a bag of exactly one vector.
    Fixed,
}

impl std::fmt::Display for BottleneckMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BottleneckMode::Bov => write!(f, "bov"),
            BottleneckMode::Fixed => write!(f, "fixed"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Latent vector width.
    pub d: usize,
    /// Encoder and decoder depth.
    pub layers: usize,
    /// Attention heads; must divide `d`.
    pub heads: usize,
    /// Target open-gate ratio for the sparsity loss.
    pub r: f64,
    pub lambda_l0: f64,
    pub lambda_sty: f64,
    pub lambda_len: f64,
    /// Gate threshold below which a vector is pruned from the bag.
    pub epsilon: f64,
    /// Maximum number of vectors a mapping generates.
    pub n_max: usize,
    /// Half-width k of the loss window around the input bag size.
    pub window: usize,
    /// Token-deletion probability during denoising pretraining.
    pub denoise_p: f64,
    /// Replace the free-bits sparsity loss with a plain `lambda_l0 * sum(g)`
    /// penalty. Off by default; convergence with this penalty is untested.
    pub l0_implicit: bool,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Longest token sequence the autoencoder accepts.
    pub max_len: usize,
    pub val_interval: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 16,
            layers: 3,
            heads: 2,
            r: 0.5,
            lambda_l0: 10.0,
            lambda_sty: 1.0,
            lambda_len: 1.0,
            epsilon: 1e-3,
            n_max: 16,
            window: 0,
            denoise_p: 0.1,
            l0_implicit: false,
            lr: 1e-4,
            batch_size: 64,
            steps: 2000,
            max_len: 64,
            val_interval: 500,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d == 0 {
            return fail("d must be positive".into());
        }
        if self.layers == 0 {
            return fail("layers must be positive".into());
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return fail(format!("heads ({}) must divide d ({})", self.heads, self.d));
        }
        if !(self.r > 0.0 && self.r <= 1.0) {
            return fail(format!("r ({}) must lie in (0, 1]", self.r));
        }
        if self.lambda_l0 < 0.0 || self.lambda_sty < 0.0 || self.lambda_len < 0.0 {
            return fail("loss weights must be non-negative".into());
        }
        if self.epsilon <= 0.0 {
            return fail(format!("epsilon ({}) must be positive", self.epsilon));
        }
        if self.n_max == 0 {
            return fail("n_max must be positive".into());
        }
        if !(self.denoise_p >= 0.0 && self.denoise_p < 1.0) {
            return fail(format!("denoise_p ({}) must lie in [0, 1)", self.denoise_p));
        }
        if self.lr <= 0.0 {
            return fail("lr must be positive".into());
        }
        if self.batch_size == 0 || self.max_len == 0 || self.val_interval == 0 {
            return fail("batch_size, max_len and val_interval must be positive".into());
        }
        Ok(())
    }
}
