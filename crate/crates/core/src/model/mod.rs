//! The Dyadformer network and its ablation variants.
//!
//! Input wiring per participant `p`:
//!
//! ```text
//! X^p ─ P_v ─┐                        ┌─ SA_sbj ─ CA_sbj(·, S^other) ─ pool ─ head ─ ô^p
//!            ├ + PE + 1⊗(m^p P_m) ─ CA_vid(X, SA_aud(U)) ┘
//! U^p ─ P_a ─┘
//! ```
//!
//! TF_V keeps only the video path and a single self-attention encoder; DF_XM
//! stops after the cross-modal encoder; DF_XS skips it. Both subject
//! streams use the same parameters.

pub mod checkpoint;
mod config;
mod count;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::ParamStore;
use crate::rng::RngStream;
use crate::tensor::{Tensor, TensorError};
use crate::transformer::{
    ca_encoder_forward, ca_encoder_forward_unshared, sa_encoder_forward, sa_encoder_forward_unshared,
    sinusoidal_positional_encoding, xavier_uniform, CaLayerWeights, ForwardCtx, SaLayerWeights,
};

pub use config::{HeadActivation, ModelConfig, ModelVariant};
pub use count::{count_parameters, parameter_breakdown, ParameterBreakdown};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

pub const NUM_TRAITS: usize = 5;
/// Trait order used everywhere: Open-mindedness, Conscientiousness,
/// Extraversion, Agreeableness, Negative emotionality.
pub const TRAIT_NAMES: [&str; NUM_TRAITS] = ["O", "C", "E", "A", "N"];

/// Five trait scores in z-score units.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OceanVector(pub [f64; NUM_TRAITS]);

impl OceanVector {
    pub fn from_slice(values: &[f64]) -> Result<Self> {
        let arr: [f64; NUM_TRAITS] = values
            .try_into()
            .map_err(|_| ModelError::Input(format!("expected 5 trait values, got {}", values.len())))?;
        if arr.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Input("non-finite trait value".into()));
        }
        Ok(Self(arr))
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Self::from_slice(t.values())
    }

    pub fn values(&self) -> &[f64; NUM_TRAITS] {
        &self.0
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, NUM_TRAITS], self.0.to_vec()).expect("fixed shape")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Participant {
    A,
    B,
}

impl Participant {
    pub const BOTH: [Participant; 2] = [Participant::A, Participant::B];

    pub fn index(self) -> usize {
        match self {
            Participant::A => 0,
            Participant::B => 1,
        }
    }

    pub fn other(self) -> Participant {
        match self {
            Participant::A => Participant::B,
            Participant::B => Participant::A,
        }
    }
}

/// Aligned features of one T-chunk window for both participants,
/// index 0 = A, 1 = B.
#[derive(Debug, Clone)]
pub struct DyadInput {
    pub video: [Tensor; 2],
    pub audio: Option<[Tensor; 2]>,
    /// `[1 × d_m]` per participant.
    pub metadata: [Tensor; 2],
}

impl DyadInput {
    pub fn new(video: [Tensor; 2], audio: Option<[Tensor; 2]>, metadata: [Tensor; 2]) -> Result<Self> {
        let metadata = metadata.map(|m| {
            let n = m.numel();
            m.reshape(&[1, n]).expect("same numel")
        });
        let input = Self { video, audio, metadata };
        let t = input.seq_len()?;
        let mut seqs: Vec<&Tensor> = input.video.iter().collect();
        if let Some(a) = &input.audio {
            seqs.extend(a.iter());
        }
        for s in seqs {
            if s.dims2()?.0 != t {
                return Err(ModelError::Input("feature sequences are not temporally aligned".into()));
            }
        }
        Ok(input)
    }

    pub fn seq_len(&self) -> Result<usize> {
        Ok(self.video[0].dims2()?.0)
    }

    /// Same window with the participants relabeled.
    pub fn swapped(&self) -> Self {
        let sw = |[a, b]: [Tensor; 2]| [b, a];
        Self {
            video: sw(self.video.clone()),
            audio: self.audio.clone().map(sw),
            metadata: sw(self.metadata.clone()),
        }
    }

    fn check_dims(&self, config: &ModelConfig) -> Result<()> {
        let want = |t: &Tensor, d: usize, what: &str| -> Result<()> {
            if t.dims2()?.1 != d {
                return Err(ModelError::Input(format!(
                    "{what} width {} does not match config {d}",
                    t.dims2()?.1
                )));
            }
            Ok(())
        };
        for p in 0..2 {
            want(&self.video[p], config.d_v, "video")?;
            want(&self.metadata[p], config.d_m, "metadata")?;
            if let Some(a) = &self.audio {
                want(&a[p], config.d_a, "audio")?;
            }
        }
        if config.consumes_audio() && self.audio.is_none() {
            return Err(ModelError::Input(format!("{} needs audio features", config.variant.label())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EmbeddingWeights {
    pub video: Tensor,
    pub audio: Tensor,
    pub meta: Tensor,
}

#[derive(Debug, Clone)]
pub struct HeadWeights {
    pub fc1: Tensor,
    pub fc2: Tensor,
    pub activation: HeadActivation,
}

/// Self-attention encoder: one shared layer applied `depth` times, or
/// `depth` distinct layers.
#[derive(Debug, Clone)]
pub struct SaEncoder {
    layers: Vec<SaLayerWeights>,
    depth: usize,
}

impl SaEncoder {
    pub fn shared(layer: SaLayerWeights, depth: usize) -> Self {
        Self { layers: vec![layer], depth }
    }

    pub fn forward(&self, x: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        Ok(if self.layers.len() == 1 {
            sa_encoder_forward(x, &self.layers[0], self.depth, ctx)?
        } else {
            sa_encoder_forward_unshared(x, &self.layers, ctx)?
        })
    }
}

#[derive(Debug, Clone)]
pub struct CaEncoder {
    layers: Vec<CaLayerWeights>,
    depth: usize,
    tag: &'static str,
}

impl CaEncoder {
    pub fn shared(layer: CaLayerWeights, depth: usize, tag: &'static str) -> Self {
        Self {
            layers: vec![layer],
            depth,
            tag,
        }
    }

    pub fn forward(&self, j: &Tensor, memory: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        Ok(if self.layers.len() == 1 {
            ca_encoder_forward(j, memory, &self.layers[0], self.depth, self.tag, ctx)?
        } else {
            ca_encoder_forward_unshared(j, memory, &self.layers, self.tag, ctx)?
        })
    }
}

#[derive(Debug, Clone)]
pub struct BertWeights {
    pub multimodal: SaEncoder,
    pub multisubject: SaEncoder,
    /// Row 0 marks video tokens, row 1 audio tokens.
    pub modality_segment: Tensor,
    /// Row 0 marks the pooled subject's tokens, row 1 the partner's.
    pub subject_segment: Tensor,
}

/// Handles to every tensor a forward pass reads.
#[derive(Debug, Clone)]
pub struct DyadWeights {
    pub embed: EmbeddingWeights,
    pub head: HeadWeights,
    pub sa_vid: Option<SaEncoder>,
    pub sa_aud: Option<SaEncoder>,
    pub ca_vid: Option<CaEncoder>,
    pub sa_sbj: Option<SaEncoder>,
    pub ca_sbj: Option<CaEncoder>,
    pub bert: Option<BertWeights>,
}

const SA_VID: &str = "sa_vid";
const SA_AUD: &str = "sa_aud";
const CA_VID: &str = "ca_vid";
const SA_SBJ: &str = "sa_sbj";
const CA_SBJ: &str = "ca_sbj";
const BERT_MM: &str = "bert_mm";
const BERT_XS: &str = "bert_xs";

#[derive(Clone, Copy, PartialEq, Eq)]
enum EncoderKind {
    SelfAttention,
    CrossAttention,
}

/// `(name, kind, depth)` of every encoder the variant instantiates.
fn encoder_plan(c: &ModelConfig) -> Vec<(&'static str, EncoderKind, usize)> {
    use EncoderKind::*;
    match c.variant {
        ModelVariant::TfV => vec![(SA_VID, SelfAttention, c.l_sbj)],
        ModelVariant::DfXm => vec![(SA_AUD, SelfAttention, c.l_aud), (CA_VID, CrossAttention, c.l_xm)],
        ModelVariant::DfXs => vec![(SA_SBJ, SelfAttention, c.l_sbj), (CA_SBJ, CrossAttention, c.l_xs)],
        ModelVariant::DfXmXs => vec![
            (SA_AUD, SelfAttention, c.l_aud),
            (CA_VID, CrossAttention, c.l_xm),
            (SA_SBJ, SelfAttention, c.l_sbj),
            (CA_SBJ, CrossAttention, c.l_xs),
        ],
        ModelVariant::BertBaseline => vec![(BERT_MM, SelfAttention, c.l_bm), (BERT_XS, SelfAttention, c.l_bs)],
    }
}

fn stored_layers(c: &ModelConfig, depth: usize) -> usize {
    if c.share_layers {
        1
    } else {
        depth
    }
}

/// Temporal embedding of one modality:
/// `features · proj + PE(T) + 1 ⊗ (m · metaproj)`, then dropout once.
pub fn embed_stream(
    features: &Tensor,
    metadata: &Tensor,
    proj: &Tensor,
    metaproj: &Tensor,
    use_metadata: bool,
    ctx: &mut ForwardCtx,
) -> Result<Tensor> {
    let (t, _) = features.dims2()?;
    let d_w = proj.dims2()?.1;
    let mut x = features.matmul(proj)?.add(&sinusoidal_positional_encoding(t, d_w)?)?;
    if use_metadata {
        let m = metadata.reshape(&[1, metadata.numel()])?;
        x = x.add_row(&m.matmul(metaproj)?)?;
    }
    Ok(ctx.apply_dropout(&x)?)
}

/// `X̂ = CA_vid(X, SA_aud(U))`: video queries the encoded audio.
pub fn cross_modal_stage(
    x_emb: &Tensor,
    u_emb: &Tensor,
    sa_aud: &SaEncoder,
    ca_vid: &CaEncoder,
    ctx: &mut ForwardCtx,
) -> Result<Tensor> {
    if x_emb.dims2()?.0 != u_emb.dims2()?.0 {
        return Err(ModelError::Input("video and audio windows differ in length".into()));
    }
    let u_hat = sa_aud.forward(u_emb, ctx)?;
    ca_vid.forward(x_emb, &u_hat, ctx)
}

/// Both subjects through the same self-encoder, then each attends to the
/// other's encoding.
pub fn cross_subject_stage(
    in_a: &Tensor,
    in_b: &Tensor,
    sa_sbj: &SaEncoder,
    ca_sbj: &CaEncoder,
    ctx: &mut ForwardCtx,
) -> Result<(Tensor, Tensor)> {
    if in_a.shape() != in_b.shape() {
        return Err(ModelError::Input(format!(
            "subject streams differ in shape: {:?} vs {:?}",
            in_a.shape(),
            in_b.shape()
        )));
    }
    let s_a = sa_sbj.forward(in_a, ctx)?;
    let s_b = sa_sbj.forward(in_b, ctx)?;
    let hat_a = ca_sbj.forward(&s_a, &s_b, ctx)?;
    let hat_b = ca_sbj.forward(&s_b, &s_a, ctx)?;
    Ok((hat_a, hat_b))
}

/// Temporal mean pooling followed by `(z W_FC1) W_FC2`; returns `[1 × 5]`.
pub fn regression_head(s_hat: &Tensor, head: &HeadWeights) -> Result<Tensor> {
    let z = s_hat.mean_rows()?;
    let mut h = z.matmul(&head.fc1)?;
    if head.activation == HeadActivation::Gelu {
        h = h.gelu()?;
    }
    Ok(h.matmul(&head.fc2)?)
}

/// Two-stage baseline: per-subject encoder over `[video; audio]` tokens
/// (2T), then a joint encoder over both subjects' outputs (4T). Each
/// subject is read out from its own video positions.
pub fn bert_baseline_forward(
    x_emb: [&Tensor; 2],
    u_emb: [&Tensor; 2],
    bert: &BertWeights,
    head: &HeadWeights,
    ctx: &mut ForwardCtx,
) -> Result<[Tensor; 2]> {
    let t = x_emb[0].dims2()?.0;
    let video_seg = bert.modality_segment.slice_rows(0, 1)?;
    let audio_seg = bert.modality_segment.slice_rows(1, 1)?;
    let own_seg = bert.subject_segment.slice_rows(0, 1)?;
    let partner_seg = bert.subject_segment.slice_rows(1, 1)?;

    let mut stage1 = Vec::with_capacity(2);
    for p in 0..2 {
        let tokens = Tensor::concat_rows(&[x_emb[p].add_row(&video_seg)?, u_emb[p].add_row(&audio_seg)?])?;
        stage1.push(bert.multimodal.forward(&tokens, ctx)?);
    }
    let mut out = Vec::with_capacity(2);
    for p in 0..2 {
        let tokens = Tensor::concat_rows(&[
            stage1[p].add_row(&own_seg)?,
            stage1[1 - p].add_row(&partner_seg)?,
        ])?;
        let encoded = bert.multisubject.forward(&tokens, ctx)?;
        out.push(regression_head(&encoded.slice_rows(0, t)?, head)?);
    }
    let b = out.pop().expect("two outputs");
    let a = out.pop().expect("two outputs");
    Ok([a, b])
}

/// A configured architecture. Parameters live in a separate [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Dyadformer {
    config: ModelConfig,
}

impl Dyadformer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Fresh parameters: Glorot-uniform matrices, unit/zero layer norms.
    /// Inputs the variant never reads (audio for video-only variants,
    /// metadata when disabled) are stored frozen.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let c = &self.config;
        let mut rng = RngStream::new(seed).substream(0x1417);
        let mut store = ParamStore::new();
        let d_w = c.d_w;

        store.insert("embed.video", &[c.d_v, d_w], xavier_uniform(c.d_v, d_w, &mut rng))?;
        let audio = xavier_uniform(c.d_a, d_w, &mut rng);
        if c.consumes_audio() {
            store.insert("embed.audio", &[c.d_a, d_w], audio)?;
        } else {
            store.insert_frozen("embed.audio", &[c.d_a, d_w], audio)?;
        }
        let meta = xavier_uniform(c.d_m, d_w, &mut rng);
        if c.use_metadata {
            store.insert("embed.meta", &[c.d_m, d_w], meta)?;
        } else {
            store.insert_frozen("embed.meta", &[c.d_m, d_w], meta)?;
        }

        for (name, kind, depth) in encoder_plan(c) {
            for l in 0..stored_layers(c, depth) {
                let prefix = format!("{name}.layer{l}");
                match kind {
                    EncoderKind::SelfAttention => SaLayerWeights::init(&mut store, &prefix, d_w, c.heads, &mut rng)?,
                    EncoderKind::CrossAttention => CaLayerWeights::init(&mut store, &prefix, d_w, c.heads, &mut rng)?,
                }
            }
        }
        if c.variant == ModelVariant::BertBaseline {
            store.insert("bert.modality_segment", &[2, d_w], xavier_uniform(2, d_w, &mut rng))?;
            store.insert("bert.subject_segment", &[2, d_w], xavier_uniform(2, d_w, &mut rng))?;
        }
        store.insert("head.fc1", &[d_w, 4 * d_w], xavier_uniform(d_w, 4 * d_w, &mut rng))?;
        store.insert("head.fc2", &[4 * d_w, NUM_TRAITS], xavier_uniform(4 * d_w, NUM_TRAITS, &mut rng))?;
        Ok(store)
    }

    pub fn weights(&self, store: &ParamStore) -> Result<DyadWeights> {
        let c = &self.config;
        let sa = |name: &'static str, depth: usize| -> Result<SaEncoder> {
            let layers = (0..stored_layers(c, depth))
                .map(|l| SaLayerWeights::load(store, &format!("{name}.layer{l}"), c.heads))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            Ok(SaEncoder { layers, depth })
        };
        let ca = |name: &'static str, depth: usize| -> Result<CaEncoder> {
            let layers = (0..stored_layers(c, depth))
                .map(|l| CaLayerWeights::load(store, &format!("{name}.layer{l}"), c.heads))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            Ok(CaEncoder { layers, depth, tag: name })
        };
        let mut w = DyadWeights {
            embed: EmbeddingWeights {
                video: store.get("embed.video")?.clone(),
                audio: store.get("embed.audio")?.clone(),
                meta: store.get("embed.meta")?.clone(),
            },
            head: HeadWeights {
                fc1: store.get("head.fc1")?.clone(),
                fc2: store.get("head.fc2")?.clone(),
                activation: c.head_activation,
            },
            sa_vid: None,
            sa_aud: None,
            ca_vid: None,
            sa_sbj: None,
            ca_sbj: None,
            bert: None,
        };
        for (name, _, depth) in encoder_plan(c) {
            match name {
                SA_VID => w.sa_vid = Some(sa(name, depth)?),
                SA_AUD => w.sa_aud = Some(sa(name, depth)?),
                CA_VID => w.ca_vid = Some(ca(name, depth)?),
                SA_SBJ => w.sa_sbj = Some(sa(name, depth)?),
                CA_SBJ => w.ca_sbj = Some(ca(name, depth)?),
                _ => {}
            }
        }
        if c.variant == ModelVariant::BertBaseline {
            w.bert = Some(BertWeights {
                multimodal: sa(BERT_MM, c.l_bm)?,
                multisubject: sa(BERT_XS, c.l_bs)?,
                modality_segment: store.get("bert.modality_segment")?.clone(),
                subject_segment: store.get("bert.subject_segment")?.clone(),
            });
        }
        Ok(w)
    }

    /// Differentiable `[1 × 5]` predictions for participants A and B.
    pub fn forward(&self, store: &ParamStore, input: &DyadInput, ctx: &mut ForwardCtx) -> Result<[Tensor; 2]> {
        let c = &self.config;
        input.check_dims(c)?;
        ctx.ln_eps = c.ln_eps;
        let w = self.weights(store)?;
        let embed = |features: &Tensor, proj: &Tensor, p: usize, ctx: &mut ForwardCtx| {
            embed_stream(features, &input.metadata[p], proj, &w.embed.meta, c.use_metadata, ctx)
        };
        let audio = |p: usize| -> Result<&Tensor> {
            input
                .audio
                .as_ref()
                .map(|a| &a[p])
                .ok_or_else(|| ModelError::Input("missing audio features".into()))
        };
        let missing = |what: &str| ModelError::InvalidConfig(format!("{what} weights missing"));

        match c.variant {
            ModelVariant::TfV => {
                let enc = w.sa_vid.as_ref().ok_or_else(|| missing(SA_VID))?;
                let mut out = Vec::with_capacity(2);
                for p in 0..2 {
                    let x = embed(&input.video[p], &w.embed.video, p, ctx)?;
                    out.push(regression_head(&enc.forward(&x, ctx)?, &w.head)?);
                }
                Ok(pair(out))
            }
            ModelVariant::DfXm => {
                let sa_aud = w.sa_aud.as_ref().ok_or_else(|| missing(SA_AUD))?;
                let ca_vid = w.ca_vid.as_ref().ok_or_else(|| missing(CA_VID))?;
                let mut out = Vec::with_capacity(2);
                for p in 0..2 {
                    let x = embed(&input.video[p], &w.embed.video, p, ctx)?;
                    let u = embed(audio(p)?, &w.embed.audio, p, ctx)?;
                    let x_hat = cross_modal_stage(&x, &u, sa_aud, ca_vid, ctx)?;
                    out.push(regression_head(&x_hat, &w.head)?);
                }
                Ok(pair(out))
            }
            ModelVariant::DfXs => {
                let sa_sbj = w.sa_sbj.as_ref().ok_or_else(|| missing(SA_SBJ))?;
                let ca_sbj = w.ca_sbj.as_ref().ok_or_else(|| missing(CA_SBJ))?;
                let mut streams = Vec::with_capacity(2);
                for p in 0..2 {
                    let x = embed(&input.video[p], &w.embed.video, p, ctx)?;
                    streams.push(if c.xs_audio {
                        let u = embed(audio(p)?, &w.embed.audio, p, ctx)?;
                        Tensor::concat_rows(&[x, u])?
                    } else {
                        x
                    });
                }
                let (a, b) = cross_subject_stage(&streams[0], &streams[1], sa_sbj, ca_sbj, ctx)?;
                Ok([regression_head(&a, &w.head)?, regression_head(&b, &w.head)?])
            }
            ModelVariant::DfXmXs => {
                let sa_aud = w.sa_aud.as_ref().ok_or_else(|| missing(SA_AUD))?;
                let ca_vid = w.ca_vid.as_ref().ok_or_else(|| missing(CA_VID))?;
                let sa_sbj = w.sa_sbj.as_ref().ok_or_else(|| missing(SA_SBJ))?;
                let ca_sbj = w.ca_sbj.as_ref().ok_or_else(|| missing(CA_SBJ))?;
                let mut fused = Vec::with_capacity(2);
                for p in 0..2 {
                    let x = embed(&input.video[p], &w.embed.video, p, ctx)?;
                    let u = embed(audio(p)?, &w.embed.audio, p, ctx)?;
                    fused.push(cross_modal_stage(&x, &u, sa_aud, ca_vid, ctx)?);
                }
                let (a, b) = cross_subject_stage(&fused[0], &fused[1], sa_sbj, ca_sbj, ctx)?;
                Ok([regression_head(&a, &w.head)?, regression_head(&b, &w.head)?])
            }
            ModelVariant::BertBaseline => {
                let bert = w.bert.as_ref().ok_or_else(|| missing("bert"))?;
                let mut xs = Vec::with_capacity(2);
                let mut us = Vec::with_capacity(2);
                for p in 0..2 {
                    xs.push(embed(&input.video[p], &w.embed.video, p, ctx)?);
                    us.push(embed(audio(p)?, &w.embed.audio, p, ctx)?);
                }
                bert_baseline_forward([&xs[0], &xs[1]], [&us[0], &us[1]], bert, &w.head, ctx)
            }
        }
    }

    /// Eval-mode predictions as plain trait vectors.
    pub fn predict(&self, store: &ParamStore, input: &DyadInput) -> Result<[OceanVector; 2]> {
        let [a, b] = self.forward(store, input, &mut ForwardCtx::eval())?;
        Ok([OceanVector::from_tensor(&a)?, OceanVector::from_tensor(&b)?])
    }
}

fn pair(mut v: Vec<Tensor>) -> [Tensor; 2] {
    let b = v.pop().expect("two outputs");
    let a = v.pop().expect("two outputs");
    [a, b]
}

#[cfg(test)]
mod tests;
