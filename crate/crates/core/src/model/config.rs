use alloc::format;

use serde::{Deserialize, Serialize};

use super::tokenizer::VOCAB_SIZE;
use crate::error::{config, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub patch_px: usize,
    pub image_px: usize,
    pub max_seq: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 12,
            n_heads: 4,
            vocab_size: VOCAB_SIZE,
            patch_px: 4,
            image_px: 32,
            max_seq: 192,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.patch_px == 0 || self.image_px == 0 || self.image_px % self.patch_px != 0 {
            return Err(config(format!(
                "image_px {} must be a positive multiple of patch_px {}",
                self.image_px, self.patch_px
            )));
        }
        if self.n_layers < 3 {
            return Err(config(format!(
                "n_layers {} is below 3; layer segmentation needs three groups",
                self.n_layers
            )));
        }
        if self.vocab_size < VOCAB_SIZE {
            return Err(config(format!(
                "vocab_size {} cannot hold the {} tokenizer symbols",
                self.vocab_size, VOCAB_SIZE
            )));
        }
        if self.max_seq <= self.n_image_tokens() + 1 {
            return Err(config("max_seq leaves no room for text after the image"));
        }
        Ok(())
    }

    pub fn n_image_tokens(&self) -> usize {
        let side = self.image_px / self.patch_px;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_px * self.patch_px * 3
    }

    pub fn params_per_layer(&self) -> usize {
        let d = self.d_model;
        // two norms (2d each), q/k/v/o projections (d²+d each),
        // MLP d→4d→d (4d²+4d, 4d²+d)
        4 * d + 4 * (d * d + d) + (4 * d * d + 4 * d) + (4 * d * d + d)
    }

    pub fn lm_head_params(&self) -> usize {
        // final norm + output projection without bias
        2 * self.d_model + self.vocab_size * self.d_model
    }

    /// Closed-form parameter count of [`super::Model`].
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let embeddings = self.vocab_size * d + self.max_seq * d;
        let projector = self.patch_dim() * d + d;
        embeddings + projector + self.n_layers * self.params_per_layer() + self.lm_head_params()
    }
}
