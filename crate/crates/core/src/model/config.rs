use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, AttentionKernel};
use crate::error::{MoseError, Result};
use crate::losses::LossWeights;
use crate::moe::MoeConfig;

/// Attention hyperparameters shared by every block; channels and shift are
/// filled in per block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionSettings {
    pub heads: usize,
    pub window_size: usize,
    pub pe_rpe: bool,
    pub pe_logcpb: bool,
    pub pe_lepe: bool,
    pub kernel: AttentionKernel,
    pub cpb_hidden: usize,
}

impl Default for AttentionSettings {
    fn default() -> Self {
        AttentionSettings {
            heads: 6,
            window_size: 8,
            pe_rpe: true,
            pe_logcpb: false,
            pe_lepe: true,
            kernel: AttentionKernel::Cosine,
            cpb_hidden: 512,
        }
    }
}

impl AttentionSettings {
    pub fn for_block(&self, channels: usize, shift: usize) -> AttentionConfig {
        AttentionConfig {
            channels,
            heads: self.heads,
            window_size: self.window_size,
            shift,
            pe_rpe: self.pe_rpe,
            pe_logcpb: self.pe_logcpb,
            pe_lepe: self.pe_lepe,
            kernel: self.kernel,
            cpb_hidden: self.cpb_hidden,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub embed_dim: usize,
    pub groups: usize,
    pub blocks_per_group: usize,
    pub attention: AttentionSettings,
    /// Feed-forward sublayer; `null` selects a dense MLP of `mlp_hidden`.
    pub moe: Option<MoeConfig>,
    /// Dense MLP width, `2 * embed_dim` when absent.
    pub mlp_hidden: Option<usize>,
    pub scale: usize,
    pub loss: LossWeights,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 4,
            embed_dim: 90,
            groups: 4,
            blocks_per_group: 6,
            attention: AttentionSettings::default(),
            moe: Some(MoeConfig::for_channels(90)),
            mlp_hidden: None,
            scale: 2,
            loss: LossWeights::default(),
        }
    }
}

impl ModelConfig {
    /// Smallest configuration exercising every sublayer.
    pub fn toy() -> Self {
        ModelConfig {
            in_channels: 4,
            embed_dim: 16,
            groups: 1,
            blocks_per_group: 2,
            attention: AttentionSettings {
                heads: 4,
                window_size: 8,
                cpb_hidden: 16,
                ..Default::default()
            },
            moe: Some(MoeConfig {
                experts: 4,
                active: 2,
                expert_hidden: 16,
                smart_merger: true,
            }),
            mlp_hidden: None,
            scale: 2,
            loss: LossWeights::default(),
        }
    }

    pub fn mlp_width(&self) -> usize {
        self.mlp_hidden.unwrap_or(2 * self.embed_dim)
    }

    /// Configured shift of block `i` within its group: `0, M/2, 0, ...`.
    pub fn shift_for(&self, block: usize) -> usize {
        if block % 2 == 1 {
            self.attention.window_size / 2
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(MoseError::Config(m));
        if !matches!(self.scale, 2..=4) {
            return fail(format!("scale {} must be 2, 3 or 4", self.scale));
        }
        if self.in_channels == 0 || self.embed_dim == 0 || self.groups == 0 || self.blocks_per_group == 0 {
            return fail("channel, group and block counts must be positive".into());
        }
        if self.mlp_hidden == Some(0) {
            return fail("mlp_hidden must be positive".into());
        }
        self.attention.for_block(self.embed_dim, 0).validate()?;
        if let Some(m) = &self.moe {
            m.validate()?;
        }
        self.loss.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text).map_err(|e| MoseError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ModelConfig::from_json(r#"{"embed_dim": 96, "moe": null}"#).is_ok());
        assert!(ModelConfig::from_json(r#"{"embedd_dim": 16}"#).is_err());
        assert!(ModelConfig::from_json(r#"{"attention": {"head": 2}}"#).is_err());
    }

    #[test]
    fn scale_must_be_supported() {
        let cfg = ModelConfig {
            scale: 5,
            ..ModelConfig::toy()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn json_roundtrip() {
        let cfg = ModelConfig::toy();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ModelConfig::from_json(&text).unwrap(), cfg);
    }
}
