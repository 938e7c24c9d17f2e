use super::{encoder_plan, stored_layers, EncoderKind, ModelConfig, ModelVariant, NUM_TRAITS};
use crate::transformer::{CaLayerWeights, SaLayerWeights};

/// Scalar counts by component. Shared weights are counted once.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParameterBreakdown {
    /// Video, audio and metadata projections.
    pub embeddings: usize,
    /// All attention encoders.
    pub encoders: usize,
    /// Segment embeddings of the BERT baseline.
    pub segments: usize,
    pub head: usize,
}

impl ParameterBreakdown {
    pub fn total(&self) -> usize {
        self.embeddings + self.encoders + self.segments + self.head
    }
}

pub fn parameter_breakdown(c: &ModelConfig) -> ParameterBreakdown {
    let d_w = c.d_w;
    let encoders = encoder_plan(c)
        .into_iter()
        .map(|(_, kind, depth)| {
            let per_layer = match kind {
                EncoderKind::SelfAttention => SaLayerWeights::num_scalars(d_w, c.heads),
                EncoderKind::CrossAttention => CaLayerWeights::num_scalars(d_w, c.heads),
            };
            stored_layers(c, depth) * per_layer
        })
        .sum();
    ParameterBreakdown {
        embeddings: (c.d_v + c.d_a + c.d_m) * d_w,
        encoders,
        segments: if c.variant == ModelVariant::BertBaseline { 4 * d_w } else { 0 },
        head: d_w * 4 * d_w + 4 * d_w * NUM_TRAITS,
    }
}

/// Distinct scalars in the model built from `c` (backbones excluded).
pub fn count_parameters(c: &ModelConfig) -> usize {
    parameter_breakdown(c).total()
}
