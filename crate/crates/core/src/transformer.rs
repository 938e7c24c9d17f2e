//! Attention building blocks: scaled dot-product and multi-head attention,
//! the position-wise feed-forward network, post-norm sub-layers, and the
//! self-attention (SA) and cross-attention (CA) encoders.
//!
//! Every projection is bias-free. Encoders reuse one layer's weights for
//! all of their iterations unless an explicit per-layer stack is passed.

use crate::params::ParamStore;
use crate::rng::RngStream;
use crate::tensor::{Mode, Result, Tensor, TensorError};

pub const DEFAULT_LN_EPS: f64 = 1e-5;

/// Per-pass state: mode, dropout stream and an optional recorder.
pub struct ForwardCtx {
    pub mode: Mode,
    pub dropout: f64,
    pub ln_eps: f64,
    rng: RngStream,
    trace: Option<Trace>,
}

/// Intermediate values captured when tracing is enabled.
#[derive(Debug, Default, Clone)]
pub struct Trace {
    /// Every attention probability matrix, in evaluation order.
    pub attention_maps: Vec<Tensor>,
    /// `(encoder tag, memory)` for every cross-attention layer evaluated.
    pub cross_memories: Vec<(String, Tensor)>,
}

impl ForwardCtx {
    pub fn train(dropout: f64, rng: RngStream) -> Self {
        Self {
            mode: Mode::Train,
            dropout,
            ln_eps: DEFAULT_LN_EPS,
            rng,
            trace: None,
        }
    }

    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            dropout: 0.0,
            ln_eps: DEFAULT_LN_EPS,
            rng: RngStream::new(0),
            trace: None,
        }
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Trace::default());
        self
    }

    pub fn take_trace(&mut self) -> Option<Trace> {
        self.trace.take()
    }

    pub fn into_rng(self) -> RngStream {
        self.rng
    }

    pub fn apply_dropout(&mut self, x: &Tensor) -> Result<Tensor> {
        x.dropout(self.dropout, self.mode, &mut self.rng)
    }

    fn record_attention(&mut self, probs: &Tensor) {
        if let Some(t) = self.trace.as_mut() {
            t.attention_maps.push(probs.clone());
        }
    }

    fn record_memory(&mut self, tag: &str, memory: &Tensor) {
        if let Some(t) = self.trace.as_mut() {
            t.cross_memories.push((tag.to_string(), memory.clone()));
        }
    }
}

/// Uniform Glorot initialization.
pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut RngStream) -> Vec<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    (0..rows * cols).map(|_| rng.uniform_range(-limit, limit)).collect()
}

fn invalid(msg: String) -> TensorError {
    TensorError::InvalidArgument(msg)
}

#[derive(Debug, Clone)]
pub struct AttentionWeights {
    pub w_q: Vec<Tensor>,
    pub w_k: Vec<Tensor>,
    pub w_v: Vec<Tensor>,
    pub w_o: Tensor,
}

impl AttentionWeights {
    pub fn init(store: &mut ParamStore, prefix: &str, d_w: usize, heads: usize, rng: &mut RngStream) -> Result<()> {
        let d_k = head_width(d_w, heads)?;
        for i in 0..heads {
            for kind in ["q", "k", "v"] {
                store.insert(format!("{prefix}.w_{kind}.{i}"), &[d_w, d_k], xavier_uniform(d_w, d_k, rng))?;
            }
        }
        store.insert(format!("{prefix}.w_o"), &[heads * d_k, d_w], xavier_uniform(heads * d_k, d_w, rng))
    }

    pub fn load(store: &ParamStore, prefix: &str, heads: usize) -> Result<Self> {
        let per_head = |kind: &str| -> Result<Vec<Tensor>> {
            (0..heads).map(|i| store.get(&format!("{prefix}.w_{kind}.{i}")).cloned()).collect()
        };
        Ok(Self {
            w_q: per_head("q")?,
            w_k: per_head("k")?,
            w_v: per_head("v")?,
            w_o: store.get(&format!("{prefix}.w_o"))?.clone(),
        })
    }

    pub fn heads(&self) -> usize {
        self.w_q.len()
    }

    pub fn num_scalars(d_w: usize, heads: usize) -> usize {
        let d_k = d_w / heads;
        3 * heads * d_w * d_k + heads * d_k * d_w
    }
}

/// `d_w / h`, which must be integral.
pub fn head_width(d_w: usize, heads: usize) -> Result<usize> {
    if heads == 0 || d_w % heads != 0 {
        return Err(invalid(format!("{heads} heads do not divide width {d_w}")));
    }
    Ok(d_w / heads)
}

#[derive(Debug, Clone)]
pub struct FfnWeights {
    pub w_1: Tensor,
    pub w_2: Tensor,
}

impl FfnWeights {
    pub fn init(store: &mut ParamStore, prefix: &str, d_w: usize, rng: &mut RngStream) -> Result<()> {
        store.insert(format!("{prefix}.w_1"), &[d_w, 4 * d_w], xavier_uniform(d_w, 4 * d_w, rng))?;
        store.insert(format!("{prefix}.w_2"), &[4 * d_w, d_w], xavier_uniform(4 * d_w, d_w, rng))
    }

    pub fn load(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            w_1: store.get(&format!("{prefix}.w_1"))?.clone(),
            w_2: store.get(&format!("{prefix}.w_2"))?.clone(),
        })
    }

    pub fn num_scalars(d_w: usize) -> usize {
        8 * d_w * d_w
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    pub fn init(store: &mut ParamStore, prefix: &str, d_w: usize) -> Result<()> {
        store.insert(format!("{prefix}.gamma"), &[d_w], vec![1.0; d_w])?;
        store.insert(format!("{prefix}.beta"), &[d_w], vec![0.0; d_w])
    }

    pub fn load(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            gamma: store.get(&format!("{prefix}.gamma"))?.clone(),
            beta: store.get(&format!("{prefix}.beta"))?.clone(),
        })
    }

    /// Unit gain, zero shift.
    pub fn identity(d_w: usize) -> Self {
        Self {
            gamma: Tensor::full(&[d_w], 1.0),
            beta: Tensor::zeros(&[d_w]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SaLayerWeights {
    pub mha: AttentionWeights,
    pub ffn: FfnWeights,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
}

impl SaLayerWeights {
    pub fn init(store: &mut ParamStore, prefix: &str, d_w: usize, heads: usize, rng: &mut RngStream) -> Result<()> {
        AttentionWeights::init(store, &format!("{prefix}.mha"), d_w, heads, rng)?;
        FfnWeights::init(store, &format!("{prefix}.ffn"), d_w, rng)?;
        LayerNormParams::init(store, &format!("{prefix}.ln1"), d_w)?;
        LayerNormParams::init(store, &format!("{prefix}.ln2"), d_w)
    }

    pub fn load(store: &ParamStore, prefix: &str, heads: usize) -> Result<Self> {
        Ok(Self {
            mha: AttentionWeights::load(store, &format!("{prefix}.mha"), heads)?,
            ffn: FfnWeights::load(store, &format!("{prefix}.ffn"))?,
            ln1: LayerNormParams::load(store, &format!("{prefix}.ln1"))?,
            ln2: LayerNormParams::load(store, &format!("{prefix}.ln2"))?,
        })
    }

    pub fn num_scalars(d_w: usize, heads: usize) -> usize {
        AttentionWeights::num_scalars(d_w, heads) + FfnWeights::num_scalars(d_w) + 4 * d_w
    }
}

#[derive(Debug, Clone)]
pub struct CaLayerWeights {
    /// Self-attention over the query stream.
    pub mha1: AttentionWeights,
    /// Attention from the query stream into the memory.
    pub mha2: AttentionWeights,
    pub ffn: FfnWeights,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
    pub ln3: LayerNormParams,
}

impl CaLayerWeights {
    pub fn init(store: &mut ParamStore, prefix: &str, d_w: usize, heads: usize, rng: &mut RngStream) -> Result<()> {
        AttentionWeights::init(store, &format!("{prefix}.mha1"), d_w, heads, rng)?;
        AttentionWeights::init(store, &format!("{prefix}.mha2"), d_w, heads, rng)?;
        FfnWeights::init(store, &format!("{prefix}.ffn"), d_w, rng)?;
        for ln in ["ln1", "ln2", "ln3"] {
            LayerNormParams::init(store, &format!("{prefix}.{ln}"), d_w)?;
        }
        Ok(())
    }

    pub fn load(store: &ParamStore, prefix: &str, heads: usize) -> Result<Self> {
        Ok(Self {
            mha1: AttentionWeights::load(store, &format!("{prefix}.mha1"), heads)?,
            mha2: AttentionWeights::load(store, &format!("{prefix}.mha2"), heads)?,
            ffn: FfnWeights::load(store, &format!("{prefix}.ffn"))?,
            ln1: LayerNormParams::load(store, &format!("{prefix}.ln1"))?,
            ln2: LayerNormParams::load(store, &format!("{prefix}.ln2"))?,
            ln3: LayerNormParams::load(store, &format!("{prefix}.ln3"))?,
        })
    }

    pub fn num_scalars(d_w: usize, heads: usize) -> usize {
        2 * AttentionWeights::num_scalars(d_w, heads) + FfnWeights::num_scalars(d_w) + 6 * d_w
    }
}

/// `softmax(Q Kᵀ / √d_k) V`, unmasked.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
    let (_, d_k) = q.dims2()?;
    let (t_m, d_k2) = k.dims2()?;
    let (t_v, _) = v.dims2()?;
    if d_k != d_k2 || t_m != t_v {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            lhs: k.shape().to_vec(),
            rhs: if d_k != d_k2 { q.shape().to_vec() } else { v.shape().to_vec() },
        });
    }
    let probs = q
        .matmul(&k.transpose()?)?
        .scale(1.0 / (d_k as f64).sqrt())?
        .softmax_rows()?;
    ctx.record_attention(&probs);
    probs.matmul(v)
}

/// `Concat(head_1..head_h) W_O`, `head_i = Att(J W_Q_i, M W_K_i, M W_V_i)`.
/// Passing the same tensor for `j` and `m` gives self-attention.
pub fn multi_head_attention(j: &Tensor, m: &Tensor, w: &AttentionWeights, ctx: &mut ForwardCtx) -> Result<Tensor> {
    let (_, dj) = j.dims2()?;
    let (_, dm) = m.dims2()?;
    let d_w = w.w_o.shape()[1];
    if dj != d_w || dm != d_w {
        return Err(TensorError::ShapeMismatch {
            op: "multi_head_attention",
            lhs: j.shape().to_vec(),
            rhs: m.shape().to_vec(),
        });
    }
    head_width(d_w, w.heads())?;
    let mut heads = Vec::with_capacity(w.heads());
    for i in 0..w.heads() {
        let q = j.matmul(&w.w_q[i])?;
        let k = m.matmul(&w.w_k[i])?;
        let v = m.matmul(&w.w_v[i])?;
        heads.push(scaled_dot_attention(&q, &k, &v, ctx)?);
    }
    let concat = if heads.len() == 1 {
        heads.pop().expect("one head")
    } else {
        Tensor::concat_cols(&heads)?
    };
    concat.matmul(&w.w_o)
}

/// `GELU(x W_1) W_2`, row by row.
pub fn position_wise_ffn(x: &Tensor, w: &FfnWeights) -> Result<Tensor> {
    x.matmul(&w.w_1)?.gelu()?.matmul(&w.w_2)
}

/// Post-norm residual: `LayerNorm(x + Dropout(block_out))`.
pub fn sublayer(x: &Tensor, block_out: &Tensor, ln: &LayerNormParams, ctx: &mut ForwardCtx) -> Result<Tensor> {
    let dropped = ctx.apply_dropout(block_out)?;
    x.add(&dropped)?.layer_norm(&ln.gamma, &ln.beta, ctx.ln_eps)
}

pub fn sa_layer(j: &Tensor, w: &SaLayerWeights, ctx: &mut ForwardCtx) -> Result<Tensor> {
    let att = multi_head_attention(j, j, &w.mha, ctx)?;
    let h = sublayer(j, &att, &w.ln1, ctx)?;
    let f = position_wise_ffn(&h, &w.ffn)?;
    sublayer(&h, &f, &w.ln2, ctx)
}

pub fn ca_layer(j: &Tensor, m: &Tensor, w: &CaLayerWeights, ctx: &mut ForwardCtx) -> Result<Tensor> {
    let att = multi_head_attention(j, j, &w.mha1, ctx)?;
    let h = sublayer(j, &att, &w.ln1, ctx)?;
    let cross = multi_head_attention(&h, m, &w.mha2, ctx)?;
    let h = sublayer(&h, &cross, &w.ln2, ctx)?;
    let f = position_wise_ffn(&h, &w.ffn)?;
    sublayer(&h, &f, &w.ln3, ctx)
}

/// `depth` iterations of one shared SA layer.
pub fn sa_encoder_forward(j: &Tensor, w: &SaLayerWeights, depth: usize, ctx: &mut ForwardCtx) -> Result<Tensor> {
    if depth == 0 {
        return Err(invalid("encoder depth must be at least 1".into()));
    }
    let mut h = j.clone();
    for _ in 0..depth {
        h = sa_layer(&h, w, ctx)?;
    }
    Ok(h)
}

/// SA stack with one weight set per layer.
pub fn sa_encoder_forward_unshared(j: &Tensor, layers: &[SaLayerWeights], ctx: &mut ForwardCtx) -> Result<Tensor> {
    if layers.is_empty() {
        return Err(invalid("encoder depth must be at least 1".into()));
    }
    let mut h = j.clone();
    for w in layers {
        h = sa_layer(&h, w, ctx)?;
    }
    Ok(h)
}

/// `depth` iterations of one shared CA layer. The memory `m` is the same
/// tensor at every iteration; only the query stream evolves.
pub fn ca_encoder_forward(
    j: &Tensor,
    m: &Tensor,
    w: &CaLayerWeights,
    depth: usize,
    tag: &str,
    ctx: &mut ForwardCtx,
) -> Result<Tensor> {
    ca_encoder_forward_layers(j, m, std::iter::repeat_n(w, depth), tag, ctx)
}

pub fn ca_encoder_forward_unshared(
    j: &Tensor,
    m: &Tensor,
    layers: &[CaLayerWeights],
    tag: &str,
    ctx: &mut ForwardCtx,
) -> Result<Tensor> {
    ca_encoder_forward_layers(j, m, layers.iter(), tag, ctx)
}

fn ca_encoder_forward_layers<'a>(
    j: &Tensor,
    m: &Tensor,
    layers: impl Iterator<Item = &'a CaLayerWeights>,
    tag: &str,
    ctx: &mut ForwardCtx,
) -> Result<Tensor> {
    let (_, dm) = m.dims2()?;
    let (_, dj) = j.dims2()?;
    if dm != dj {
        return Err(TensorError::ShapeMismatch {
            op: "ca_encoder",
            lhs: j.shape().to_vec(),
            rhs: m.shape().to_vec(),
        });
    }
    let mut h = j.clone();
    let mut depth = 0;
    for w in layers {
        ctx.record_memory(tag, m);
        h = ca_layer(&h, m, w, ctx)?;
        depth += 1;
    }
    if depth == 0 {
        return Err(invalid("encoder depth must be at least 1".into()));
    }
    Ok(h)
}

/// `PE[t, 2i] = sin(t / 10000^(2i/d))`, `PE[t, 2i+1] = cos(...)`, `t` from 0.
pub fn sinusoidal_positional_encoding(len: usize, d_w: usize) -> Result<Tensor> {
    if d_w == 0 || d_w % 2 != 0 {
        return Err(invalid(format!("positional encoding width must be even, got {d_w}")));
    }
    if len == 0 {
        return Err(invalid("positional encoding length must be positive".into()));
    }
    let mut v = vec![0.0; len * d_w];
    for t in 0..len {
        for i in 0..d_w / 2 {
            let freq = 10000f64.powf(2.0 * i as f64 / d_w as f64);
            let angle = t as f64 / freq;
            v[t * d_w + 2 * i] = angle.sin();
            v[t * d_w + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(&[len, d_w], v)
}
