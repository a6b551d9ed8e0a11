use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{AugmentConfig, CropMode};
use crate::model::{EncoderConfig, FfnKind, MaskGenConfig, ModelConfig, ProjectorConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Masking {
    #[default]
    Adversarial,
    Random,
    Block,
}

impl std::str::FromStr for Masking {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adversarial" => Ok(Self::Adversarial),
            "random" => Ok(Self::Random),
            "block" => Ok(Self::Block),
            _ => Err(Error::config(format!("unknown masking strategy {s:?}"))),
        }
    }
}

impl std::fmt::Display for Masking {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Adversarial => "adversarial",
            Self::Random => "random",
            Self::Block => "block",
        })
    }
}

/// Every training hyperparameter. Defaults are the large-scale settings;
/// `configs/desk.cfg` overrides them for CPU runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr_enc: f64,
    pub lr_mask: f64,
    pub lr_min: f64,
    pub k_decay: f64,
    pub weight_decay: f64,
    /// Warmup length as a fraction of `steps`, used when `warmup_steps`
    /// is absent.
    pub warmup_frac: f64,
    pub warmup_steps: Option<usize>,
    pub alpha: f64,
    pub beta: f64,
    pub n_masks: usize,
    pub momentum_start: f64,
    pub n_local_views: usize,
    pub n_global_views: usize,
    pub local_frac: [f64; 2],
    pub global_frac: [f64; 2],
    /// `(patches, points per patch)` for global views.
    pub patches_global: [usize; 2],
    pub patches_local: [usize; 2],
    pub points: usize,
    pub oversample: usize,
    pub seed: u64,

    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mask_depth: usize,
    pub mask_heads: usize,
    pub stochastic_depth: f64,
    pub ffn: FfnKind,
    pub embed_hidden: usize,
    pub pos_hidden: usize,
    pub proj_hidden: usize,
    pub proj_bottleneck: usize,
    pub prototypes: usize,

    pub teacher_temp_start: f64,
    pub teacher_temp_end: f64,
    pub teacher_temp_warmup_frac: f64,
    pub student_temp: f64,
    pub center_momentum: f64,
    pub masked_positions_only: bool,
    /// Feed the masked student copies of each global view into the CLS
    /// loss (otherwise an extra unmasked student pass supplies them).
    pub cls_from_masked: bool,
    /// Also mask local views.
    pub mask_local_views: bool,
    pub crop_mode: CropMode,
    pub augment: AugmentConfig,
    pub masking: Masking,
    /// Ratio range of the random and block baselines.
    pub mask_ratio: [f64; 2],
    /// Write `step_{n}.ckpt` every this many steps (0: final only).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 33_000,
            batch: 128,
            lr_enc: 1e-4,
            lr_mask: 3e-5,
            lr_min: 1e-6,
            k_decay: 1.5,
            weight_decay: 0.05,
            warmup_frac: 0.05,
            warmup_steps: None,
            alpha: 0.2,
            beta: 0.03,
            n_masks: 3,
            momentum_start: 0.994,
            n_local_views: 8,
            n_global_views: 2,
            local_frac: [0.1, 0.3],
            global_frac: [0.3, 0.5],
            patches_global: [32, 32],
            patches_local: [16, 16],
            points: 1024,
            oversample: 1200,
            seed: 0,
            embed_dim: 384,
            depth: 12,
            heads: 6,
            mask_depth: 3,
            mask_heads: 4,
            stochastic_depth: 0.1,
            ffn: FfnKind::Swiglu,
            embed_hidden: 128,
            pos_hidden: 128,
            proj_hidden: 2048,
            proj_bottleneck: 256,
            prototypes: 1024,
            teacher_temp_start: 0.04,
            teacher_temp_end: 0.07,
            teacher_temp_warmup_frac: 0.1,
            student_temp: 0.1,
            center_momentum: 0.9,
            masked_positions_only: false,
            cls_from_masked: true,
            mask_local_views: false,
            crop_mode: CropMode::Contiguous,
            augment: AugmentConfig::default(),
            masking: Masking::Adversarial,
            mask_ratio: [0.10, 0.45],
            checkpoint_every: 0,
        }
    }
}

pub const DESK_CFG: &str = include_str!("../../../../configs/desk.cfg");
pub const PAPER_CFG: &str = include_str!("../../../../configs/paper.cfg");

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Missing {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn desk() -> Self {
        Self::parse(DESK_CFG).expect("bundled desk config is valid")
    }

    pub fn paper() -> Self {
        Self::parse(PAPER_CFG).expect("bundled paper config is valid")
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the resolved config, framed like a git blob.
    pub fn content_hash(&self) -> String {
        let text = self.to_text();
        let mut h = Sha256::new();
        h.update(format!("blob {}\0", text.len()).as_bytes());
        h.update(text.as_bytes());
        hex::encode(h.finalize())
    }

    pub fn warmup(&self) -> usize {
        self.warmup_steps
            .unwrap_or_else(|| (self.warmup_frac * self.steps as f64).round() as usize)
    }

    pub fn model(&self) -> ModelConfig {
        let encoder = EncoderConfig {
            depth: self.depth,
            heads: self.heads,
            embed_dim: self.embed_dim,
            stochastic_depth_rate: self.stochastic_depth,
            ffn_kind: self.ffn,
        };
        ModelConfig {
            embed_hidden: self.embed_hidden,
            pos_hidden: self.pos_hidden,
            encoder: encoder.clone(),
            projector: ProjectorConfig {
                hidden: self.proj_hidden,
                bottleneck: self.proj_bottleneck,
                prototypes: self.prototypes,
            },
            mask_gen: MaskGenConfig {
                encoder: EncoderConfig {
                    depth: self.mask_depth,
                    heads: self.mask_heads,
                    ..encoder
                },
                n_masks: self.n_masks,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(msg));
        if self.steps == 0 || self.batch == 0 {
            return bad("steps and batch must be positive".into());
        }
        if self.warmup() >= self.steps {
            return bad(format!("warmup {} must be shorter than {} steps", self.warmup(), self.steps));
        }
        for (name, v) in [
            ("lr_enc", self.lr_enc),
            ("lr_mask", self.lr_mask),
            ("k_decay", self.k_decay),
            ("student_temp", self.student_temp),
            ("teacher_temp_start", self.teacher_temp_start),
            ("teacher_temp_end", self.teacher_temp_end),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("lr_min", self.lr_min),
            ("weight_decay", self.weight_decay),
            ("alpha", self.alpha),
            ("beta", self.beta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.momentum_start) || !(0.0..1.0).contains(&self.center_momentum) {
            return bad("momentum values must lie in [0, 1]".into());
        }
        for (name, [lo, hi]) in [
            ("local_frac", self.local_frac),
            ("global_frac", self.global_frac),
            ("mask_ratio", self.mask_ratio),
        ] {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return bad(format!("{name} must satisfy 0 < lo <= hi <= 1, got [{lo}, {hi}]"));
            }
        }
        if self.mask_ratio[1] >= 1.0 {
            return bad("mask_ratio must stay below 1".into());
        }
        if self.n_global_views == 0 {
            return bad("at least one global view is required".into());
        }
        if self.n_global_views + self.n_local_views < 2 {
            return bad("the CLS loss needs at least two views".into());
        }
        if !(self.points <= self.oversample && self.points > 0) {
            return bad("points must be positive and at most oversample".into());
        }
        for (name, [p, k], frac) in [
            ("patches_global", self.patches_global, self.global_frac[0]),
            ("patches_local", self.patches_local, self.local_frac[0]),
        ] {
            let smallest = (frac * self.points as f64).ceil() as usize;
            if p == 0 || k == 0 || p > smallest || k > smallest {
                return bad(format!(
                    "{name} {p}x{k} does not fit the smallest view of {smallest} points"
                ));
            }
        }
        self.model().validate()
    }
}
