use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the four towers. Every field is part of the checkpoint
/// header; a checkpoint only loads into an identical config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden width `d` shared by all towers.
    pub width: usize,
    pub heads: usize,
    /// Transformer blocks per tower.
    pub layers: usize,
    /// Adapter bottleneck `r`.
    pub bottleneck: usize,
    /// Joint embedding width `e`.
    pub embed_dim: usize,
    pub patch: usize,
    pub frames: usize,
    pub height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub regions: usize,
    pub vocab_size: usize,
    pub label_max_len: usize,
    pub description_max_len: usize,
    /// Scale `s` of the parallel MLP adapter branch in video blocks.
    pub parallel_scale: f64,
    /// One projection head for both label branches (otherwise one each).
    pub shared_label_head: bool,
    /// With `false` no adapters are created: frozen towers plus heads.
    pub adapters: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: 32,
            heads: 4,
            layers: 2,
            bottleneck: 8,
            embed_dim: 32,
            patch: 8,
            frames: 4,
            height: 32,
            image_width: 32,
            channels: 3,
            regions: 5,
            vocab_size: 0,
            label_max_len: crate::textproc::LABEL_MAX_LEN,
            description_max_len: crate::textproc::DESCRIPTION_MAX_LEN,
            parallel_scale: 0.5,
            shared_label_head: true,
            adapters: true,
            init_seed: 0,
        }
    }
}

/// Longest description the long-context tower may be configured for.
pub const MAX_DESCRIPTION_LEN: usize = 248;

impl ModelConfig {
    /// CLIP ViT-B/16-sized towers at 16 frames of 224×224, used for
    /// parameter accounting only.
    pub fn reference_scale(vocab_size: usize) -> Self {
        ModelConfig {
            width: 768,
            heads: 12,
            layers: 12,
            bottleneck: 96,
            embed_dim: 512,
            patch: 16,
            frames: 16,
            height: 224,
            image_width: 224,
            channels: 3,
            regions: 11,
            vocab_size,
            label_max_len: 77,
            description_max_len: MAX_DESCRIPTION_LEN,
            ..ModelConfig::default()
        }
    }

    pub fn patches_per_frame(&self) -> usize {
        (self.height / self.patch) * (self.image_width / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("width", self.width),
            ("heads", self.heads),
            ("layers", self.layers),
            ("bottleneck", self.bottleneck),
            ("embed_dim", self.embed_dim),
            ("patch", self.patch),
            ("frames", self.frames),
            ("channels", self.channels),
        ] {
            if v == 0 {
                return bad(format!("model.{name} must be ≥ 1"));
            }
        }
        if self.width % self.heads != 0 {
            return bad(format!("heads {} must divide width {}", self.heads, self.width));
        }
        if self.height % self.patch != 0 || self.image_width % self.patch != 0 || self.height == 0 {
            return bad(format!(
                "patch {} must divide frame size {}×{}",
                self.patch, self.height, self.image_width
            ));
        }
        if self.regions < 2 {
            return bad("regions must be ≥ 2".into());
        }
        if self.vocab_size <= 4 {
            return bad("vocab_size must exceed the 4 reserved tokens".into());
        }
        if self.label_max_len < 3 {
            return bad("label_max_len must be ≥ 3".into());
        }
        if !(3..=MAX_DESCRIPTION_LEN).contains(&self.description_max_len) {
            return bad(format!(
                "description_max_len must be in [3, {MAX_DESCRIPTION_LEN}], got {}",
                self.description_max_len
            ));
        }
        if !self.parallel_scale.is_finite() {
            return bad("parallel_scale must be finite".into());
        }
        Ok(())
    }

    /// `(trainable, total)` parameter counts computed from the shapes alone,
    /// without allocating the model.
    pub fn param_counts(&self) -> (usize, usize) {
        let d = self.width;
        let block = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * 4 * d + 4 * d) + (4 * d * d + d);
        let adapter = if self.adapters {
            d * self.bottleneck + self.bottleneck + self.bottleneck * d + d
        } else {
            0
        };
        let head = d * self.embed_dim;
        let m = self.patches_per_frame();
        let visual_frozen = self.patch_dim() * d + d + m * d + self.frames * d + self.layers * block + 2 * d;
        let text_frozen = |len: usize| self.vocab_size * d + len * d + self.layers * block + 2 * d;

        let video_train = 3 * self.layers * adapter + head;
        let face_train = 3 * self.layers * adapter + 2 * head;
        let label_heads = if self.shared_label_head { 1 } else { 2 };
        let label_train = 2 * self.layers * adapter + label_heads * head;
        let desc_train = self.layers * adapter + head;
        let trainable = video_train + face_train + label_train + desc_train;
        let frozen = 2 * visual_frozen
            + self.regions * self.channels
            + text_frozen(self.label_max_len)
            + text_frozen(self.description_max_len);
        (trainable, trainable + frozen)
    }
}
