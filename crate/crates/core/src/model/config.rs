use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FfnKind {
    Swiglu,
    Gelu,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub depth: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub stochastic_depth_rate: f64,
    pub ffn_kind: FfnKind,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.stochastic_depth_rate) {
            return Err(Error::config("stochastic_depth_rate must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Hidden width of the feed-forward layer.
    pub fn ffn_hidden(&self) -> usize {
        match self.ffn_kind {
            FfnKind::Swiglu => (8 * self.embed_dim / 3).div_ceil(8) * 8,
            FfnKind::Gelu => 4 * self.embed_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectorConfig {
    pub hidden: usize,
    pub bottleneck: usize,
    pub prototypes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskGenConfig {
    pub encoder: EncoderConfig,
    pub n_masks: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Hidden width of the per-point layers in the patch embedder.
    pub embed_hidden: usize,
    /// Hidden width of the position MLP.
    pub pos_hidden: usize,
    pub encoder: EncoderConfig,
    pub projector: ProjectorConfig,
    pub mask_gen: MaskGenConfig,
}

impl ModelConfig {
    /// The large configuration: 12/3 blocks, 6/4 heads, width 384.
    pub fn paper() -> Self {
        Self {
            embed_hidden: 128,
            pos_hidden: 128,
            encoder: EncoderConfig {
                depth: 12,
                heads: 6,
                embed_dim: 384,
                stochastic_depth_rate: 0.1,
                ffn_kind: FfnKind::Swiglu,
            },
            projector: ProjectorConfig {
                hidden: 2048,
                bottleneck: 256,
                prototypes: 1024,
            },
            mask_gen: MaskGenConfig {
                encoder: EncoderConfig {
                    depth: 3,
                    heads: 4,
                    embed_dim: 384,
                    stochastic_depth_rate: 0.1,
                    ffn_kind: FfnKind::Swiglu,
                },
                n_masks: 3,
            },
        }
    }

    /// Small enough for a laptop CPU.
    pub fn desk() -> Self {
        let encoder = EncoderConfig {
            depth: 2,
            heads: 4,
            embed_dim: 64,
            stochastic_depth_rate: 0.1,
            ffn_kind: FfnKind::Swiglu,
        };
        Self {
            embed_hidden: 32,
            pos_hidden: 32,
            encoder: encoder.clone(),
            projector: ProjectorConfig {
                hidden: 256,
                bottleneck: 64,
                prototypes: 128,
            },
            mask_gen: MaskGenConfig {
                encoder: EncoderConfig { depth: 1, ..encoder },
                n_masks: 3,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.mask_gen.encoder.validate()?;
        if self.mask_gen.encoder.embed_dim != self.encoder.embed_dim {
            return Err(Error::config("mask generator and encoder widths must match"));
        }
        if self.mask_gen.n_masks < 2 {
            return Err(Error::config("at least 2 masks are required"));
        }
        let p = &self.projector;
        if [self.embed_hidden, self.pos_hidden, p.hidden, p.bottleneck, p.prototypes].contains(&0) {
            return Err(Error::config("layer widths must be positive"));
        }
        Ok(())
    }
}
