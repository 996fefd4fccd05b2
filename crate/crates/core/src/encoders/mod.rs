//! Image and text encoders projecting into a shared unit-norm embedding space.

mod layers;
pub mod sparsify;
mod text;
mod vit;

use serde::{Deserialize, Serialize};

pub use layers::{Attention, Block, LayerNorm, Linear, Mlp};
pub use sparsify::{cls_attentiveness, default_sparsify_layers, kept_count, token_sparsify, SparsifyTrace};
pub use text::TextTransformer;
pub use vit::{patchify, SparsifyMode, VisionTransformer, VitOutput};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub proj_dim: usize,
    pub keep_rate: f64,
    /// 1-based layer indices; derived from depth when absent.
    #[serde(default)]
    pub sparsify_layers: Option<Vec<usize>>,
}

fn default_channels() -> usize {
    3
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            channels: 3,
            depth: 6,
            width: 128,
            heads: 4,
            proj_dim: 64,
            keep_rate: 0.7,
            sparsify_layers: None,
        }
    }
}

impl ViTConfig {
    pub fn patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn resolved_sparsify_layers(&self) -> Vec<usize> {
        self.sparsify_layers
            .clone()
            .unwrap_or_else(|| default_sparsify_layers(self.depth))
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) || self.image_size == 0 {
            return Err(Error::config(
                "vit.image_size",
                format!("{} is not divisible by patch_size {}", self.image_size, self.patch_size),
            ));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::config(
                "vit.width",
                format!("{} is not divisible by heads {}", self.width, self.heads),
            ));
        }
        if self.depth == 0 || self.proj_dim == 0 || self.channels == 0 {
            return Err(Error::config("vit", "depth, proj_dim and channels must be positive"));
        }
        validate_keep_rate(self.keep_rate, "vit.keep_rate")?;
        for &l in &self.resolved_sparsify_layers() {
            if l == 0 || l > self.depth {
                return Err(Error::config(
                    "vit.sparsify_layers",
                    format!("layer {l} outside [1, {}]", self.depth),
                ));
            }
        }
        Ok(())
    }
}

pub fn validate_keep_rate(keep_rate: f64, field: &str) -> Result<()> {
    if keep_rate > 0.0 && keep_rate <= 1.0 {
        Ok(())
    } else {
        Err(Error::config(field, format!("keep rate {keep_rate} outside (0, 1]")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub proj_dim: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            max_len: 16,
            depth: 4,
            width: 128,
            heads: 4,
            proj_dim: 64,
        }
    }
}

impl TextConfig {
    pub fn validate(&self, vit: &ViTConfig) -> Result<()> {
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::config(
                "text.width",
                format!("{} is not divisible by heads {}", self.width, self.heads),
            ));
        }
        if self.proj_dim != vit.proj_dim {
            return Err(Error::config(
                "text.proj_dim",
                format!("{} differs from vit.proj_dim {}", self.proj_dim, vit.proj_dim),
            ));
        }
        if self.depth == 0 || self.max_len == 0 || self.vocab_size == 0 {
            return Err(Error::config("text", "depth, max_len and vocab_size must be positive"));
        }
        Ok(())
    }
}
