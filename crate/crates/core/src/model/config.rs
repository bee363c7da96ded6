use serde::{Deserialize, Serialize};

use crate::error::{CctError, Result};
use crate::numerics::GeluForm;

use super::tokenizer::{plan_tokenizer, TokenizerPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalEmbedding {
    #[default]
    Sinusoidal,
    Learnable,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Seqpool,
    ClassToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerKind {
    #[default]
    Convolutional,
    Patch,
}

/// The three compact-transformer variants, by tokenizer and pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Patch embedding + class token.
    VitLite,
    /// Patch embedding + SeqPool.
    Cvt,
    /// Convolutional tokenizer + SeqPool.
    Cct,
    /// Convolutional tokenizer + class token; not one of the named variants.
    ConvClassToken,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::VitLite => "ViT-Lite",
            Variant::Cvt => "CVT",
            Variant::Cct => "CCT",
            Variant::ConvClassToken => "conv tokenizer + class token",
        })
    }
}

/// Model hyperparameters. Defaults are the `table5-compat` preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CctConfig {
    /// `[height, width]` in pixels.
    pub image_size: [usize; 2],
    pub in_channels: usize,
    pub tokenizer: TokenizerKind,
    pub tokenizer_stages: usize,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    pub conv_padding: usize,
    pub pool_kernel: usize,
    pub pool_stride: usize,
    pub pool_padding: usize,
    /// Lower clamp for the first tokenizer stage's channel count.
    pub min_stem_channels: usize,
    /// Only read when `tokenizer` is `patch`.
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub encoder_depth: usize,
    pub mlp_ratio: usize,
    pub dropout_rate: f64,
    pub attention_dropout_rate: f64,
    pub num_classes: usize,
    pub positional_embedding: PositionalEmbedding,
    pub pooling: Pooling,
    pub gelu: GeluForm,
    pub layer_norm_eps: f64,
}

impl Default for CctConfig {
    fn default() -> Self {
        CctConfig {
            image_size: [256, 256],
            in_channels: 1,
            tokenizer: TokenizerKind::Convolutional,
            tokenizer_stages: 4,
            conv_kernel: 5,
            conv_stride: 1,
            conv_padding: 1,
            pool_kernel: 5,
            pool_stride: 2,
            pool_padding: 1,
            min_stem_channels: 16,
            patch_size: 16,
            embed_dim: 512,
            num_heads: 8,
            encoder_depth: 2,
            mlp_ratio: 2,
            dropout_rate: 0.1,
            attention_dropout_rate: 0.1,
            num_classes: 2,
            positional_embedding: PositionalEmbedding::Sinusoidal,
            pooling: Pooling::Seqpool,
            gelu: GeluForm::Exact,
            layer_norm_eps: 1e-5,
        }
    }
}

/// Names accepted by [`CctConfig::preset`].
pub const PRESET_NAMES: &[&str] = &["table5-literal", "table5-literal-3stage", "table5-compat", "tiny-test", "gradcheck-tiny"];

impl CctConfig {
    /// The hyperparameter table taken at face value: stride-2 convolutions and
    /// stride-2 pools over four stages. Its geometry does not close at 256².
    pub fn table5_literal() -> Self {
        CctConfig { conv_stride: 2, ..Self::default() }
    }

    /// Literal strides with one stage dropped: 3×3 final map, 9 tokens.
    pub fn table5_literal_3stage() -> Self {
        CctConfig { tokenizer_stages: 3, ..Self::table5_literal() }
    }

    /// Stride-1 convolutions, four stages, 169 tokens.
    pub fn table5_compat() -> Self {
        Self::default()
    }

    /// Small enough to train on 32×32 synthetic images in seconds.
    pub fn tiny_test() -> Self {
        CctConfig {
            image_size: [32, 32],
            in_channels: 1,
            tokenizer_stages: 2,
            conv_kernel: 3,
            conv_stride: 1,
            conv_padding: 1,
            pool_kernel: 3,
            pool_stride: 2,
            pool_padding: 1,
            min_stem_channels: 8,
            patch_size: 4,
            embed_dim: 16,
            num_heads: 2,
            encoder_depth: 1,
            mlp_ratio: 2,
            dropout_rate: 0.0,
            attention_dropout_rate: 0.0,
            ..Self::default()
        }
    }

    /// 12×12 input, one tokenizer stage, d=8, 2 heads, depth 1.
    pub fn gradcheck_tiny() -> Self {
        CctConfig { image_size: [12, 12], tokenizer_stages: 1, embed_dim: 8, patch_size: 4, ..Self::tiny_test() }
    }

    pub fn preset(name: &str) -> Option<Self> {
        Some(match name {
            "table5-literal" => Self::table5_literal(),
            "table5-literal-3stage" => Self::table5_literal_3stage(),
            "table5-compat" => Self::table5_compat(),
            "tiny-test" => Self::tiny_test(),
            "gradcheck-tiny" => Self::gradcheck_tiny(),
            _ => return None,
        })
    }

    pub fn variant(&self) -> Variant {
        match (self.tokenizer, self.pooling) {
            (TokenizerKind::Patch, Pooling::ClassToken) => Variant::VitLite,
            (TokenizerKind::Patch, Pooling::Seqpool) => Variant::Cvt,
            (TokenizerKind::Convolutional, Pooling::Seqpool) => Variant::Cct,
            (TokenizerKind::Convolutional, Pooling::ClassToken) => Variant::ConvClassToken,
        }
    }

    /// Same hyperparameters rewired as another variant.
    pub fn with_variant(&self, variant: Variant) -> Self {
        let (tokenizer, pooling) = match variant {
            Variant::VitLite => (TokenizerKind::Patch, Pooling::ClassToken),
            Variant::Cvt => (TokenizerKind::Patch, Pooling::Seqpool),
            Variant::Cct => (TokenizerKind::Convolutional, Pooling::Seqpool),
            Variant::ConvClassToken => (TokenizerKind::Convolutional, Pooling::ClassToken),
        };
        CctConfig { tokenizer, pooling, ..self.clone() }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads.max(1)
    }

    pub fn mlp_hidden(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    /// Check every invariant, including tokenizer geometry, and return the plan.
    pub fn validate(&self) -> Result<TokenizerPlan> {
        let p = |msg: String| Err(CctError::Parameter(msg));
        if self.embed_dim == 0 || self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return p(format!("embed_dim {} must be a positive multiple of num_heads {}", self.embed_dim, self.num_heads));
        }
        if self.num_classes < 2 {
            return p(format!("num_classes {} must be at least 2", self.num_classes));
        }
        if !matches!(self.in_channels, 1 | 3) {
            return p(format!("in_channels {} must be 1 or 3", self.in_channels));
        }
        if self.mlp_ratio == 0 {
            return p("mlp_ratio must be at least 1".into());
        }
        for (name, rate) in [("dropout_rate", self.dropout_rate), ("attention_dropout_rate", self.attention_dropout_rate)] {
            if !(0.0..1.0).contains(&rate) {
                return p(format!("{name} {rate} outside [0, 1)"));
            }
        }
        if !(self.layer_norm_eps > 0.0) {
            return p(format!("layer_norm_eps {} must be positive", self.layer_norm_eps));
        }
        if self.positional_embedding == PositionalEmbedding::Sinusoidal && !self.embed_dim.is_multiple_of(2) {
            return p(format!("sinusoidal positions need an even embed_dim, got {}", self.embed_dim));
        }
        plan_tokenizer(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_resolve() {
        for name in PRESET_NAMES {
            assert!(CctConfig::preset(name).is_some(), "{name}");
        }
        assert!(CctConfig::preset("nope").is_none());
    }

    #[test]
    fn variants_from_config_alone() {
        let base = CctConfig::tiny_test();
        assert_eq!(base.variant(), Variant::Cct);
        assert_eq!(base.with_variant(Variant::Cvt).variant(), Variant::Cvt);
        assert_eq!(base.with_variant(Variant::VitLite).variant(), Variant::VitLite);
    }

    #[test]
    fn rejects_bad_head_split() {
        let c = CctConfig { embed_dim: 10, num_heads: 4, ..CctConfig::tiny_test() };
        assert!(matches!(c.validate(), Err(CctError::Parameter(_))));
    }

    #[test]
    fn rejects_single_class() {
        let c = CctConfig { num_classes: 1, ..CctConfig::tiny_test() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_rejects_unknown_keys() {
        let err = serde_json::from_str::<CctConfig>(r#"{"embed_dim": 64, "bogus": 1}"#);
        assert!(err.is_err());
        let ok: CctConfig = serde_json::from_str(r#"{"embed_dim": 64, "num_heads": 4}"#).unwrap();
        assert_eq!(ok.embed_dim, 64);
        assert_eq!(ok.image_size, [256, 256]);
    }
}
