//! Encoder hyperparameters and ablation variants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::MaskMode;

/// Which encoding components are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Backbone plus POS features only; graph encoding skipped entirely.
    PosOnly,
    /// Local one-hop relation attention added.
    Local,
    /// Local and global (soft-path) components.
    Full,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pos" => Ok(Variant::PosOnly),
            "local" => Ok(Variant::Local),
            "full" => Ok(Variant::Full),
            other => Err(Error::Config(format!(
                "unknown variant {other:?}, expected pos|local|full"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::PosOnly => "pos",
            Variant::Local => "local",
            Variant::Full => "full",
        }
    }
}

/// Hyperparameters of the graph encoder. The node width is
/// `d_x = d_backbone + d_pos` and must divide evenly into both head counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Toy backbone hidden size.
    pub d_backbone: usize,
    /// POS embedding size.
    pub d_pos: usize,
    /// Relation embedding size, kept well below `d_x`.
    pub d_r: usize,
    pub heads_local: usize,
    pub heads_global: usize,
    /// Soft-path truncation bound, counting node and relation elements
    /// uniformly.
    pub max_path_len: usize,
    pub mask_mode: MaskModeConfig,
    /// Vanilla self-attention layers in the backbone.
    pub backbone_layers: usize,
    /// Vanilla self-attention layers stacked after the graph encoder.
    pub final_selfattn_layers: usize,
    /// Position-table capacity; sequences longer than this are rejected.
    pub max_len: usize,
    /// Span decode length cap, in nodes.
    pub max_answer_len: usize,
    /// Dropout on attention weights and hidden states during training.
    pub dropout: f64,
}

/// Serializable mirror of [`MaskMode`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskModeConfig {
    Literal,
    Hard,
}

impl MaskModeConfig {
    pub fn mode(self) -> MaskMode {
        match self {
            MaskModeConfig::Literal => MaskMode::Literal,
            MaskModeConfig::Hard => MaskMode::Hard,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(MaskModeConfig::Literal),
            "hard" => Ok(MaskModeConfig::Hard),
            other => Err(Error::Config(format!(
                "unknown mask mode {other:?}, expected literal|hard"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            MaskModeConfig::Literal => "literal",
            MaskModeConfig::Hard => "hard",
        }
    }
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_backbone: 64,
            d_pos: 64,
            d_r: 64,
            heads_local: 4,
            heads_global: 2,
            max_path_len: 8,
            mask_mode: MaskModeConfig::Literal,
            backbone_layers: 2,
            final_selfattn_layers: 1,
            max_len: 192,
            max_answer_len: 30,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    /// Node hidden size: backbone output concatenated with the POS
    /// embedding.
    pub fn d_x(&self) -> usize {
        self.d_backbone + self.d_pos
    }

    pub fn validate(&self) -> Result<()> {
        let d_x = self.d_x();
        if self.d_backbone == 0 || self.d_pos == 0 || self.d_r == 0 {
            return Err(Error::Config("hidden sizes must be positive".into()));
        }
        if self.heads_local == 0 || self.heads_global == 0 {
            return Err(Error::Config("head counts must be positive".into()));
        }
        if d_x % self.heads_local != 0 {
            return Err(Error::Config(format!(
                "d_x = {d_x} is not divisible by heads_local = {}",
                self.heads_local
            )));
        }
        if d_x % self.heads_global != 0 {
            return Err(Error::Config(format!(
                "d_x = {d_x} is not divisible by heads_global = {}",
                self.heads_global
            )));
        }
        if self.d_r >= d_x {
            return Err(Error::Config(format!(
                "d_r = {} must be smaller than d_x = {d_x}",
                self.d_r
            )));
        }
        if self.max_path_len < 1 {
            return Err(Error::Config("max_path_len must be at least 1".into()));
        }
        if self.max_len < 4 {
            return Err(Error::Config("max_len must allow at least one word".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let cfg = EncoderConfig::default();
        assert_eq!(cfg.d_x(), 128);
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_indivisible_heads_and_oversized_relations() {
        let mut cfg = EncoderConfig::default();
        cfg.heads_local = 3;
        assert!(cfg.validate().is_err());

        let mut cfg = EncoderConfig::default();
        cfg.d_r = cfg.d_x();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn variant_and_mask_parsing() {
        assert_eq!(Variant::parse("pos").unwrap(), Variant::PosOnly);
        assert_eq!(Variant::parse("local").unwrap(), Variant::Local);
        assert_eq!(Variant::parse("full").unwrap(), Variant::Full);
        assert!(Variant::parse("both").is_err());
        assert_eq!(
            MaskModeConfig::parse("hard").unwrap(),
            MaskModeConfig::Hard
        );
    }
}
