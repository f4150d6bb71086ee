use serde::{Deserialize, Serialize};

use crate::data::vocab::token_vocab_size;
use crate::error::{Error, Result};

/// Architecture of the dual-stream model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VlmConfig {
    pub embed_dim: usize,
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    /// Rings of neighbouring patches each region token also sees.
    pub patch_context: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub fusion: bool,
    /// Number of trailing blocks preceded by a cross-attention layer.
    pub fusion_layers: usize,
    pub tau_init: f64,
    pub vocab_size: usize,
    pub max_text_len: usize,
    /// Learned positional embeddings on the text side.
    pub text_positional: bool,
    /// Side of the per-region mask grid laid over the region's box.
    pub mask_grid: usize,
}

impl Default for VlmConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            image_size: 32,
            channels: 3,
            patch_size: 4,
            patch_context: 1,
            depth: 4,
            heads: 4,
            mlp_ratio: 2,
            fusion: true,
            fusion_layers: 2,
            tau_init: 0.07,
            vocab_size: token_vocab_size(),
            max_text_len: 64,
            text_positional: true,
            mask_grid: 8,
        }
    }
}

impl VlmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 || self.depth == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return bad("embed_dim, depth, heads and mlp_ratio must be positive".into());
        }
        if self.embed_dim % self.heads != 0 {
            return bad(format!("embed_dim {} is not divisible by {} heads", self.embed_dim, self.heads));
        }
        if self.fusion_layers > self.depth {
            return bad(format!("fusion_layers {} exceeds depth {}", self.fusion_layers, self.depth));
        }
        if self.fusion && self.fusion_layers == 0 {
            return bad("fusion enabled with zero fusion layers".into());
        }
        if !(self.tau_init > 0.0 && self.tau_init.is_finite()) {
            return bad(format!("tau_init must be positive, got {}", self.tau_init));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!("patch {} does not tile image {}", self.patch_size, self.image_size));
        }
        if self.vocab_size == 0 || self.max_text_len == 0 || self.channels == 0 || self.mask_grid == 0 {
            return bad("vocab_size, max_text_len, channels and mask_grid must be positive".into());
        }
        Ok(())
    }

    /// Regions per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn regions(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Side of the pixel window embedded into one region token.
    pub fn patch_window(&self) -> usize {
        (2 * self.patch_context + 1) * self.patch_size
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_window() * self.patch_window() * self.channels
    }

    pub fn pixels(&self) -> usize {
        self.image_size * self.image_size
    }

    /// Cross-attention layers actually present.
    pub fn active_fusion_layers(&self) -> usize {
        if self.fusion {
            self.fusion_layers
        } else {
            0
        }
    }

    /// Image blocks that run before the first fusion layer.
    pub fn trunk_depth(&self) -> usize {
        self.depth - self.active_fusion_layers()
    }
}
