//! Model hyperparameters.

use crate::error::{Error, Result};

/// Architecture and mixing hyperparameters for the encoder.
///
/// `htm_layer` and `vtm_layer` are 1-based: layer 1 is the first encoder
/// block. `ell` extends the attention rollout window for token saliency:
/// saliency at layer `k` multiplies the attention maps of layers
/// `k..=k+ell`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub depth: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
    pub htm_layer: Option<usize>,
    pub vtm_layer: Option<usize>,
    /// Difficulty threshold: instances with loss strictly below it count as easy.
    pub tau: f64,
    /// Minimum saliency difference a token swap must clear.
    pub rho: f64,
    /// Tokens pooled per earlier layer for key/value extension.
    pub kappa: usize,
    /// Extra rollout steps beyond the hook layer's own attention map.
    pub ell: usize,
    pub score_loss_weight: f64,
    /// When true, gradients flow into pooled earlier-layer tokens instead of
    /// treating them as constants.
    pub vtm_pooled_grad: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 16,
            patch_size: 4,
            in_channels: 1,
            depth: 4,
            heads: 4,
            dim: 64,
            mlp_ratio: 2.0,
            num_classes: 4,
            htm_layer: Some(2),
            vtm_layer: Some(3),
            tau: 0.2,
            rho: 0.005,
            kappa: 5,
            ell: 0,
            score_loss_weight: 1.0,
            vtm_pooled_grad: false,
        }
    }
}

impl ModelConfig {
    /// Number of tokens per image.
    pub fn n_tokens(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        ((self.dim as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 {
            return Err(Error::config("image_size and patch_size must be positive"));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::config("in_channels must be positive"));
        }
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be positive"));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::config("mlp_ratio must be positive"));
        }
        if self.tau < 0.0 || self.tau.is_nan() {
            return Err(Error::config("tau must be non-negative"));
        }
        if self.rho < 0.0 || self.rho.is_nan() {
            return Err(Error::config("rho must be non-negative"));
        }
        if !(self.score_loss_weight >= 0.0) || self.score_loss_weight.is_infinite() {
            return Err(Error::config("score_loss_weight must be finite and non-negative"));
        }
        if let Some(k) = self.htm_layer {
            if k == 0 || k > self.depth {
                return Err(Error::config(format!(
                    "htm_layer {k} outside 1..={}",
                    self.depth
                )));
            }
            if k + self.ell > self.depth {
                return Err(Error::config(format!(
                    "rollout window {k}..={} exceeds depth {}",
                    k + self.ell,
                    self.depth
                )));
            }
            if self.n_tokens() < 2 {
                return Err(Error::config("token mixing needs at least 2 tokens"));
            }
        }
        if let Some(k) = self.vtm_layer {
            if k < 2 || k > self.depth {
                return Err(Error::config(format!(
                    "vtm_layer {k} outside 2..={} (it needs at least one earlier layer)",
                    self.depth
                )));
            }
            if self.kappa == 0 || self.kappa > self.n_tokens() {
                return Err(Error::config(format!(
                    "kappa {} outside 1..={}",
                    self.kappa,
                    self.n_tokens()
                )));
            }
        }
        if let (Some(h), Some(v)) = (self.htm_layer, self.vtm_layer) {
            if h >= v {
                return Err(Error::config(format!(
                    "htm_layer {h} must precede vtm_layer {v}"
                )));
            }
        }
        Ok(())
    }
}
