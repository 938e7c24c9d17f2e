use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelError;

/// Architecture variants of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelVariant {
    /// Video-only self-attention Transformer, one participant at a time.
    #[serde(rename = "TF_V")]
    TfV,
    /// Cross-modal attention only (video queries encoded audio).
    #[serde(rename = "DF_XM")]
    DfXm,
    /// Cross-subject attention only (each subject queries the other).
    #[serde(rename = "DF_XS")]
    DfXs,
    /// Cross-modal then cross-subject attention.
    #[serde(rename = "DF_XM_XS")]
    DfXmXs,
    /// Two-stage bidirectional encoder over concatenated token sequences.
    #[serde(rename = "BERT_BASELINE")]
    BertBaseline,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 5] = [
        ModelVariant::TfV,
        ModelVariant::DfXm,
        ModelVariant::DfXs,
        ModelVariant::DfXmXs,
        ModelVariant::BertBaseline,
    ];

    /// Short label used in tables.
    pub fn label(self) -> &'static str {
        match self {
            ModelVariant::TfV => "TF_v",
            ModelVariant::DfXm => "DF_xm",
            ModelVariant::DfXs => "DF_xs",
            ModelVariant::DfXmXs => "DF_xm,xs",
            ModelVariant::BertBaseline => "BERT",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            ModelVariant::TfV => "TF_V",
            ModelVariant::DfXm => "DF_XM",
            ModelVariant::DfXs => "DF_XS",
            ModelVariant::DfXmXs => "DF_XM_XS",
            ModelVariant::BertBaseline => "BERT_BASELINE",
        }
    }

    pub fn uses_cross_modal(self) -> bool {
        matches!(self, ModelVariant::DfXm | ModelVariant::DfXmXs)
    }

    pub fn uses_cross_subject(self) -> bool {
        matches!(self, ModelVariant::DfXs | ModelVariant::DfXmXs)
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for ModelVariant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_uppercase();
        match norm.as_str() {
            "TFV" => Ok(ModelVariant::TfV),
            "DFXM" => Ok(ModelVariant::DfXm),
            "DFXS" => Ok(ModelVariant::DfXs),
            "DFXMXS" => Ok(ModelVariant::DfXmXs),
            "BERT" | "BERTBASELINE" => Ok(ModelVariant::BertBaseline),
            _ => Err(ModelError::InvalidConfig(format!("unknown variant {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadActivation {
    /// The two head layers compose linearly.
    #[default]
    None,
    Gelu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub d_w: usize,
    pub heads: usize,
    /// Audio self-encoder depth.
    pub l_aud: usize,
    /// Cross-modal encoder depth.
    pub l_xm: usize,
    /// Subject self-encoder depth; also the depth of the TF_V encoder.
    pub l_sbj: usize,
    /// Cross-subject encoder depth.
    pub l_xs: usize,
    /// Multi-modal stage depth of the BERT baseline.
    pub l_bm: usize,
    /// Multi-subject stage depth of the BERT baseline.
    pub l_bs: usize,
    pub d_v: usize,
    pub d_a: usize,
    pub d_m: usize,
    pub dropout: f64,
    pub use_metadata: bool,
    /// One weight set per encoder, reused by all of its layers.
    pub share_layers: bool,
    pub head_activation: HeadActivation,
    /// DF_XS alternative: audio tokens concatenated after the video tokens.
    pub xs_audio: bool,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::paper(ModelVariant::DfXmXs)
    }
}

impl ModelConfig {
    /// Full-size settings: d_w = 768, 12 heads, 512/128/21 input widths.
    pub fn paper(variant: ModelVariant) -> Self {
        let (l_sbj, l_bm) = match variant {
            ModelVariant::TfV => (2, 3),
            _ => (1, 3),
        };
        Self {
            variant,
            d_w: 768,
            heads: 12,
            l_aud: 1,
            l_xm: 1,
            l_sbj,
            l_xs: 1,
            l_bm,
            l_bs: 3,
            d_v: 512,
            d_a: 128,
            d_m: 21,
            dropout: 0.2,
            use_metadata: true,
            share_layers: true,
            head_activation: HeadActivation::None,
            xs_audio: false,
            ln_eps: crate::transformer::DEFAULT_LN_EPS,
        }
    }

    /// CPU-trainable settings for synthetic experiments.
    pub fn desk(variant: ModelVariant) -> Self {
        Self {
            d_w: 32,
            heads: 4,
            d_v: 20,
            d_a: 10,
            d_m: 21,
            ..Self::paper(variant)
        }
    }

    pub fn d_k(&self) -> usize {
        self.d_w / self.heads
    }

    /// Whether the variant reads audio features.
    pub fn consumes_audio(&self) -> bool {
        match self.variant {
            ModelVariant::TfV => false,
            ModelVariant::DfXs => self.xs_audio,
            _ => true,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.d_w == 0 || self.d_w % 2 != 0 {
            return bad(format!("d_w must be even and positive, got {}", self.d_w));
        }
        if self.heads == 0 || self.d_w % self.heads != 0 {
            return bad(format!("{} heads do not divide d_w = {}", self.heads, self.d_w));
        }
        if self.d_v == 0 || self.d_a == 0 || self.d_m == 0 {
            return bad("input widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return bad(format!("ln_eps must be positive, got {}", self.ln_eps));
        }
        for (name, depth) in self.required_depths() {
            if depth == 0 {
                return bad(format!("{} requires {name} >= 1", self.variant.label()));
            }
        }
        Ok(())
    }

    fn required_depths(&self) -> Vec<(&'static str, usize)> {
        match self.variant {
            ModelVariant::TfV => vec![("l_sbj", self.l_sbj)],
            ModelVariant::DfXm => vec![("l_aud", self.l_aud), ("l_xm", self.l_xm)],
            ModelVariant::DfXs => vec![("l_sbj", self.l_sbj), ("l_xs", self.l_xs)],
            ModelVariant::DfXmXs => vec![
                ("l_aud", self.l_aud),
                ("l_xm", self.l_xm),
                ("l_sbj", self.l_sbj),
                ("l_xs", self.l_xs),
            ],
            ModelVariant::BertBaseline => vec![("l_bm", self.l_bm), ("l_bs", self.l_bs)],
        }
    }
}
