use serde::{Deserialize, Serialize};

use crate::error::{DealError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiniClipConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_layers_vision: usize,
    pub num_layers_text: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    /// Rows of the token table; must cover the tokenizer's vocabulary.
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub projection_dim: usize,
    pub init_temperature: f64,
    pub seed: u64,
}

impl Default for MiniClipConfig {
    fn default() -> Self {
        MiniClipConfig {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            embed_dim: 64,
            num_layers_vision: 2,
            num_layers_text: 2,
            num_heads: 4,
            mlp_ratio: 2,
            vocab_size: 64,
            max_text_len: 32,
            projection_dim: 32,
            init_temperature: 0.07,
            seed: 0,
        }
    }
}

pub const MIN_TEMPERATURE: f64 = 0.01;
pub const MAX_TEMPERATURE: f64 = 1.0;

impl MiniClipConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(DealError::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return fail(format!("embed_dim {} must be divisible by num_heads {}", self.embed_dim, self.num_heads));
        }
        if self.num_layers_vision == 0 || self.num_layers_text == 0 {
            return fail("each tower needs at least one layer".into());
        }
        if self.channels == 0 || self.mlp_ratio == 0 || self.projection_dim == 0 {
            return fail("channels, mlp_ratio and projection_dim must be positive".into());
        }
        if self.vocab_size < 4 || self.max_text_len < 2 {
            return fail("vocab_size must cover the reserved ids and max_text_len must fit bos+eos".into());
        }
        if !(MIN_TEMPERATURE..=MAX_TEMPERATURE).contains(&self.init_temperature) {
            return fail(format!(
                "init_temperature {} outside [{MIN_TEMPERATURE}, {MAX_TEMPERATURE}]",
                self.init_temperature
            ));
        }
        Ok(())
    }
}
