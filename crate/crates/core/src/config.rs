use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Architecture of a class-token vision transformer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// CPU-trainable default: 32px images, 4px patches, width 192.
    pub fn toy() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            embed_dim: 192,
            depth: 6,
            heads: 3,
            mlp_ratio: 4,
            num_classes: 10,
        }
    }

    /// ViT-B/16 at 224px, kept for compute accounting.
    pub fn vit_base() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
            num_classes: 1000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CoreError::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return fail(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.channels == 0 || self.embed_dim == 0 || self.mlp_ratio == 0 || self.num_classes < 2 {
            return fail("channels, embed_dim and mlp_ratio must be positive and num_classes >= 2".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch-token count L (class token excluded).
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    /// Names of fields that differ from `other`.
    pub fn mismatched_fields(&self, other: &ModelConfig) -> Vec<&'static str> {
        let mut out = Vec::new();
        let pairs = [
            ("image_size", self.image_size, other.image_size),
            ("patch_size", self.patch_size, other.patch_size),
            ("channels", self.channels, other.channels),
            ("embed_dim", self.embed_dim, other.embed_dim),
            ("depth", self.depth, other.depth),
            ("heads", self.heads, other.heads),
            ("mlp_ratio", self.mlp_ratio, other.mlp_ratio),
            ("num_classes", self.num_classes, other.num_classes),
        ];
        for (name, a, b) in pairs {
            if a != b {
                out.push(name);
            }
        }
        out
    }

    pub fn ensure_matches(&self, other: &ModelConfig) -> Result<()> {
        let diff = self.mismatched_fields(other);
        if diff.is_empty() {
            Ok(())
        } else {
            Err(CoreError::ConfigMismatch(diff))
        }
    }
}
