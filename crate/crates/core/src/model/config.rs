use crate::error::{Error, Result};
use crate::nn::AttentionMode;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    /// Total encoder depth.
    pub depth: usize,
    /// Leading blocks that see image tokens only.
    pub image_blocks: usize,
    /// Trailing blocks that carry label tokens.
    pub lt_blocks: usize,
    pub labels: usize,
    pub mode: AttentionMode,
    pub dropout: f64,
}

impl Default for ModelConfig {
    /// Desk-scale configuration: 32×32 grayscale, 4×4 patch grid, 4 LT blocks.
    fn default() -> Self {
        ModelConfig {
            height: 32,
            width: 32,
            channels: 1,
            patch: 8,
            dim: 64,
            heads: 4,
            depth: 6,
            image_blocks: 2,
            lt_blocks: 4,
            labels: 4,
            mode: AttentionMode::OneWay,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    /// ViT-S/16 at 224², with label tokens in the last four blocks.
    pub fn vit_small(labels: usize) -> Self {
        ModelConfig {
            height: 224,
            width: 224,
            channels: 3,
            patch: 16,
            dim: 384,
            heads: 6,
            depth: 12,
            image_blocks: 8,
            lt_blocks: 4,
            labels,
            mode: AttentionMode::OneWay,
            dropout: 0.0,
        }
    }

    /// The same backbone with the label-token machinery switched off.
    pub fn as_baseline(&self) -> Self {
        ModelConfig {
            image_blocks: self.depth,
            lt_blocks: 0,
            mode: AttentionMode::Baseline,
            ..self.clone()
        }
    }

    /// The same backbone under another mode. Leaving baseline restores
    /// `lt_blocks` (default 4, capped at the depth).
    pub fn with_mode(&self, mode: AttentionMode, lt_blocks: usize) -> Self {
        if mode == AttentionMode::Baseline {
            return self.as_baseline();
        }
        let lt = lt_blocks.min(self.depth);
        ModelConfig {
            image_blocks: self.depth - lt,
            lt_blocks: lt,
            mode,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("height", self.height),
            ("width", self.width),
            ("channels", self.channels),
            ("patch", self.patch),
            ("dim", self.dim),
            ("heads", self.heads),
            ("depth", self.depth),
            ("labels", self.labels),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible by patch size {}",
                self.height, self.width, self.patch
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.image_blocks + self.lt_blocks != self.depth {
            return Err(Error::Config(format!(
                "image_blocks ({}) + lt_blocks ({}) must equal depth ({})",
                self.image_blocks, self.lt_blocks, self.depth
            )));
        }
        if (self.mode == AttentionMode::Baseline) != (self.lt_blocks == 0) {
            return Err(Error::Config(format!(
                "mode {} is incompatible with lt_blocks = {} (baseline exactly when lt_blocks = 0)",
                self.mode, self.lt_blocks
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    /// Number of image patches `n`.
    pub fn num_patches(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    /// Flattened patch width `p²·C`.
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn hidden(&self) -> usize {
        4 * self.dim
    }

    /// Parameter count from the architecture alone.
    pub fn parameter_count(&self) -> usize {
        let d = self.dim;
        let n = self.num_patches();
        let c = self.labels;
        let linear = |i: usize, o: usize| i * o + o;
        let block = 2 * (2 * d) + linear(d, 3 * d) + linear(d, d) + linear(d, self.hidden()) + linear(self.hidden(), d);
        let backbone = linear(self.patch_dim(), d) + (n + 1) * d + d + self.depth * block + 2 * d;
        let cls_head = linear(d, c);
        let label = if self.mode.has_label_tokens() {
            c * d + c * (d + 1)
        } else {
            0
        };
        backbone + cls_head + label
    }
}
