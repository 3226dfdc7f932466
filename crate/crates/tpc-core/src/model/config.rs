//! Architecture and propagation-control configuration, with the DeiT-style
//! presets selectable by name.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::HaltMode;
use crate::stabilizer::ScaleMode;
use crate::tensor::DType;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("unknown preset '{0}' (expected deit-t, deit-s or deit-b)")]
    UnknownPreset(String),
}

/// What happens to tokens that are masked out at a layer.
///
/// `Zero` keeps them in their slots with zeroed embeddings (the literal
/// elementwise-mask update); `Drop` removes them from the block's token set
/// entirely, which is what actually saves compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    Zero,
    #[default]
    Drop,
}

/// Center of the Gaussian depth prior for the distribution loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TargetDepth {
    /// Half the model depth, rounded up.
    #[default]
    Auto,
    Fixed(f64),
    /// Batch-mean halting depth, detached from the gradient tape.
    Dynamic,
}

/// Whether the adaptive halting path runs at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ModelVariant {
    Vanilla,
    #[default]
    Tpc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TpcConfig {
    /// Sigmoid gate slope for the pause/non-restart readouts.
    pub gamma: f64,
    /// Sigmoid gate shift.
    pub beta: f64,
    /// Regularizer mix: 1 keeps each token's own break probability,
    /// 0 replaces it with the active-set mean.
    pub zeta: f64,
    /// Halting threshold margin; a token halts when its cumulation reaches
    /// `1 - delta`.
    pub delta: f64,
    /// Neighbor count for sparse attention, clamped to the active-token
    /// count per call.
    pub kappa: usize,
    /// Ponder loss weight.
    pub phi_p: f64,
    /// Distribution loss weight.
    pub phi_d: f64,
    pub target_depth: TargetDepth,
    /// Embedding dimensions read by the pause and non-restart gates.
    pub gate_dims: (usize, usize),
    pub attn_scale_mode: ScaleMode,
    pub halt_mode: HaltMode,
    pub mask_mode: MaskMode,
    /// Train gamma and beta as two shared scalars instead of constants.
    pub learnable_gates: bool,
    /// Route the regularized break probability into the cumulation only,
    /// leaving output weights and losses on the raw values.
    pub regularize_cumulation_only: bool,
    /// Turn off sparse attention entirely (dense attention regardless of
    /// kappa).
    pub stabilizer: bool,
}

impl Default for TpcConfig {
    fn default() -> Self {
        TpcConfig {
            gamma: 5.0,
            beta: 40.0,
            zeta: 0.5,
            delta: 0.01,
            kappa: 100,
            phi_p: 5e-4,
            phi_d: 0.1,
            target_depth: TargetDepth::Auto,
            gate_dims: (0, 1),
            attn_scale_mode: ScaleMode::SqrtD,
            halt_mode: HaltMode::CumulativeSum,
            mask_mode: MaskMode::Drop,
            learnable_gates: false,
            regularize_cumulation_only: false,
            stabilizer: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub mlp_ratio: f64,
    pub variant: ModelVariant,
    pub dtype: DType,
    pub tpc: TpcConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: 12,
            embed_dim: 384,
            heads: 6,
            patch_size: 16,
            image_size: 224,
            channels: 3,
            num_classes: 1000,
            mlp_ratio: 4.0,
            variant: ModelVariant::Tpc,
            dtype: DType::F64,
            tpc: TpcConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        let (embed_dim, heads) = match name {
            "deit-t" => (192, 3),
            "deit-s" => (384, 6),
            "deit-b" => (768, 12),
            other => return Err(ConfigError::UnknownPreset(other.to_string())),
        };
        Ok(ModelConfig {
            embed_dim,
            heads,
            ..ModelConfig::default()
        })
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Patch tokens per image (excluding CLS).
    pub fn patch_tokens(&self) -> usize {
        let per_side = self.image_size / self.patch_size;
        per_side * per_side
    }

    /// Total tokens including CLS.
    pub fn tokens(&self) -> usize {
        self.patch_tokens() + 1
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    /// Resolved center of the depth prior for this architecture.
    pub fn resolved_target_depth(&self) -> Option<f64> {
        match self.tpc.target_depth {
            TargetDepth::Auto => Some((self.depth as f64 / 2.0).ceil()),
            TargetDepth::Fixed(v) => Some(v),
            TargetDepth::Dynamic => None,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: String| Err(ConfigError::Invalid(m));
        if self.depth == 0 || self.embed_dim == 0 || self.heads == 0 {
            return err("depth, embed_dim and heads must be positive".into());
        }
        if self.embed_dim % self.heads != 0 {
            return err(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.image_size % self.patch_size != 0 {
            return err(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_classes == 0 {
            return err("num_classes must be positive".into());
        }
        let t = &self.tpc;
        if !(t.delta > 0.0 && t.delta < 1.0) {
            return err(format!("delta must be in (0,1), got {}", t.delta));
        }
        if !(0.0..=1.0).contains(&t.zeta) {
            return err(format!("zeta must be in [0,1], got {}", t.zeta));
        }
        if t.kappa == 0 {
            return err("kappa must be at least 1".into());
        }
        if t.gate_dims.0 == t.gate_dims.1
            || t.gate_dims.0 >= self.embed_dim
            || t.gate_dims.1 >= self.embed_dim
        {
            return err(format!(
                "gate_dims {:?} must be distinct and below embed_dim {}",
                t.gate_dims, self.embed_dim
            ));
        }
        if let TargetDepth::Fixed(v) = t.target_depth {
            if !(1.0 <= v && v <= self.depth as f64) {
                return err(format!(
                    "target_depth {} outside 1..={}",
                    v, self.depth
                ));
            }
        }
        Ok(())
    }
}
