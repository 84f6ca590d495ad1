//! Per-modality transformer encoder: input projection, CLS prepending,
//! learned positions, and pre-norm residual layers.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, small_normal, ParamId, ParamStore};
use crate::tensor::{AttentionMask, Graph, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;
pub const EMBED_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Mode, dropout rate and the dropout random stream for one forward pass.
#[derive(Debug)]
pub struct ForwardCtx {
    pub mode: Mode,
    pub dropout: f64,
    rng: ChaCha8Rng,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self { mode: Mode::Eval, dropout: 0.0, rng: ChaCha8Rng::seed_from_u64(0) }
    }

    pub fn train(dropout: f64, seed: u64) -> Self {
        Self { mode: Mode::Train, dropout, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Identity in eval mode.
    pub fn dropout(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        match self.mode {
            Mode::Eval => Ok(x),
            Mode::Train => g.dropout(x, self.dropout, &mut self.rng),
        }
    }
}

/// One modality's token sequence on the graph. When `has_cls` is set the
/// CLS token sits at row 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenSet {
    pub modality: usize,
    pub tokens: Var,
    pub has_cls: bool,
}

impl TokenSet {
    pub fn len(&self, g: &Graph) -> usize {
        g.value(self.tokens).rows()
    }

    pub fn is_empty(&self, g: &Graph) -> bool {
        self.len(g) == 0
    }

    pub fn with_tokens(self, tokens: Var) -> Self {
        Self { tokens, ..self }
    }
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    /// `head_dim × dim` slice of the output projection.
    pub wo: ParamId,
}

#[derive(Clone, Debug)]
pub struct LayerParams {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub heads: Vec<HeadParams>,
    pub bo: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl LayerParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("dim {dim} is not divisible by {heads} heads")));
        }
        let hd = dim / heads;
        let hidden = dim * mlp_ratio;
        let ln1_gain = store.add(format!("{prefix}.ln1.gain"), Tensor::full(&[dim], 1.0))?;
        let ln1_bias = store.add(format!("{prefix}.ln1.bias"), Tensor::zeros(&[dim]))?;
        let mut head_params = Vec::with_capacity(heads);
        for h in 0..heads {
            let p = format!("{prefix}.attn.head{h}");
            head_params.push(HeadParams {
                wq: store.add(format!("{p}.wq"), fan_in_uniform(rng, dim, hd))?,
                bq: store.add(format!("{p}.bq"), Tensor::zeros(&[hd]))?,
                wk: store.add(format!("{p}.wk"), fan_in_uniform(rng, dim, hd))?,
                bk: store.add(format!("{p}.bk"), Tensor::zeros(&[hd]))?,
                wv: store.add(format!("{p}.wv"), fan_in_uniform(rng, dim, hd))?,
                bv: store.add(format!("{p}.bv"), Tensor::zeros(&[hd]))?,
                // The full output projection has fan-in `dim`.
                wo: store.add(format!("{p}.wo"), scaled_uniform(rng, hd, dim, dim))?,
            });
        }
        Ok(Self {
            ln1_gain,
            ln1_bias,
            heads: head_params,
            bo: store.add(format!("{prefix}.attn.bo"), Tensor::zeros(&[dim]))?,
            ln2_gain: store.add(format!("{prefix}.ln2.gain"), Tensor::full(&[dim], 1.0))?,
            ln2_bias: store.add(format!("{prefix}.ln2.bias"), Tensor::zeros(&[dim]))?,
            w1: store.add(format!("{prefix}.mlp.w1"), fan_in_uniform(rng, dim, hidden))?,
            b1: store.add(format!("{prefix}.mlp.b1"), Tensor::zeros(&[hidden]))?,
            w2: store.add(format!("{prefix}.mlp.w2"), fan_in_uniform(rng, hidden, dim))?,
            b2: store.add(format!("{prefix}.mlp.b2"), Tensor::zeros(&[dim]))?,
        })
    }

    /// Every parameter id of the layer.
    pub fn ids(&self) -> Vec<ParamId> {
        let mut out = vec![self.ln1_gain, self.ln1_bias];
        for h in &self.heads {
            out.extend([h.wq, h.bq, h.wk, h.bk, h.wv, h.bv, h.wo]);
        }
        out.extend([self.bo, self.ln2_gain, self.ln2_bias, self.w1, self.b1, self.w2, self.b2]);
        out
    }
}

fn scaled_uniform<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::matrix(rows, cols, data).expect("shape matches by construction")
}

/// Projection to the shared width, CLS embedding and positional table for one modality.
#[derive(Clone, Debug)]
pub struct EmbedParams {
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub cls: ParamId,
    pub pos: ParamId,
}

impl EmbedParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        input_dim: usize,
        tokens: usize,
        dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            proj_w: store.add(format!("{prefix}.proj.w"), fan_in_uniform(rng, input_dim, dim))?,
            proj_b: store.add(format!("{prefix}.proj.b"), Tensor::zeros(&[dim]))?,
            cls: store.add(format!("{prefix}.cls"), small_normal(rng, &[1, dim], EMBED_STD))?,
            pos: store.add(format!("{prefix}.pos"), small_normal(rng, &[tokens + 1, dim], EMBED_STD))?,
        })
    }
}

/// `raw · W + b`, validating the declared input width.
pub fn project(g: &mut Graph, store: &ParamStore, w: ParamId, b: ParamId, raw: Var) -> Result<Var> {
    let expected = store.value(w).rows();
    if g.value(raw).cols() != expected {
        return Err(Error::shape(
            "project",
            format!("features have width {}, modality declares {expected}", g.value(raw).cols()),
        ));
    }
    let w = g.param(store, w);
    let b = g.param(store, b);
    let h = g.matmul(raw, w)?;
    g.add_row(h, b)
}

/// `[cls | tokens] + pos[0..n+1]`
pub fn prepend_cls_with_positions(g: &mut Graph, store: &ParamStore, cls: ParamId, pos: ParamId, tokens: Var) -> Result<Var> {
    let n = g.value(tokens).rows();
    let table = store.value(pos).rows();
    if table < n + 1 {
        return Err(Error::shape("positions", format!("table of {table} rows for {} tokens", n + 1)));
    }
    let cls = g.param(store, cls);
    let seq = g.concat_rows(&[cls, tokens])?;
    let pos = g.param(store, pos);
    let pos = if table == n + 1 { pos } else { g.slice_rows(pos, 0..n + 1)? };
    g.add(seq, pos)
}

/// Projects raw `N × D_in` features, adds positions and prepends CLS.
pub fn project_and_embed(
    g: &mut Graph,
    store: &ParamStore,
    params: &EmbedParams,
    modality: usize,
    raw: &Tensor,
) -> Result<TokenSet> {
    let raw = g.input(raw.clone())?;
    let h = project(g, store, params.proj_w, params.proj_b, raw)?;
    let tokens = prepend_cls_with_positions(g, store, params.cls, params.pos, h)?;
    Ok(TokenSet { modality, tokens, has_cls: true })
}

/// Multi-head self-attention over pre-normalized input `h`. Returns the
/// summed head projections (before bias) and each head's attention matrix.
fn attention(
    g: &mut Graph,
    store: &ParamStore,
    layer: &LayerParams,
    h: Var,
    mask: Option<&Arc<AttentionMask>>,
) -> Result<(Var, Vec<Var>)> {
    let mut outs = Vec::with_capacity(layer.heads.len());
    let mut weights = Vec::with_capacity(layer.heads.len());
    for head in &layer.heads {
        let hd = store.value(head.wq).cols();
        let q = affine(g, store, h, head.wq, head.bq)?;
        let k = affine(g, store, h, head.wk, head.bk)?;
        let v = affine(g, store, h, head.wv, head.bv)?;
        let scores = g.matmul_nt(q, k)?;
        let scores = g.scale(scores, 1.0 / (hd as f64).sqrt())?;
        let attn = g.masked_softmax_rows(scores, mask)?;
        let ctx = g.matmul(attn, v)?;
        let wo = g.param(store, head.wo);
        outs.push(g.matmul(ctx, wo)?);
        weights.push(attn);
    }
    let summed = if outs.len() == 1 { outs[0] } else { g.add_n(&outs)? };
    Ok((summed, weights))
}

fn affine(g: &mut Graph, store: &ParamStore, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let w = g.param(store, w);
    let b = g.param(store, b);
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// Pre-norm residual layer, also returning per-head attention weights.
pub fn encoder_layer_with_attention(
    g: &mut Graph,
    store: &ParamStore,
    layer: &LayerParams,
    x: Var,
    mask: Option<&Arc<AttentionMask>>,
    ctx: &mut ForwardCtx,
) -> Result<(Var, Vec<Var>)> {
    if let Some(m) = mask {
        let n = g.value(x).rows();
        if m.side() != n {
            return Err(Error::shape("encoder_layer", format!("mask side {} for {n} tokens", m.side())));
        }
    }
    let (g1, b1) = (g.param(store, layer.ln1_gain), g.param(store, layer.ln1_bias));
    let h = g.layer_norm(x, g1, b1, LN_EPS)?;
    let (attn_out, weights) = attention(g, store, layer, h, mask)?;
    let bo = g.param(store, layer.bo);
    let attn_out = g.add_row(attn_out, bo)?;
    let attn_out = ctx.dropout(g, attn_out)?;
    let y = g.add(attn_out, x)?;

    let (g2, b2) = (g.param(store, layer.ln2_gain), g.param(store, layer.ln2_bias));
    let h = g.layer_norm(y, g2, b2, LN_EPS)?;
    let hidden = affine(g, store, h, layer.w1, layer.b1)?;
    let hidden = g.gelu(hidden)?;
    let mlp_out = affine(g, store, hidden, layer.w2, layer.b2)?;
    let mlp_out = ctx.dropout(g, mlp_out)?;
    Ok((g.add(mlp_out, y)?, weights))
}

pub fn encoder_layer(
    g: &mut Graph,
    store: &ParamStore,
    layer: &LayerParams,
    x: TokenSet,
    mask: Option<&Arc<AttentionMask>>,
    ctx: &mut ForwardCtx,
) -> Result<TokenSet> {
    let (out, _) = encoder_layer_with_attention(g, store, layer, x.tokens, mask, ctx)?;
    Ok(x.with_tokens(out))
}

/// Composes `layers` densely; an empty stack is the identity.
pub fn unimodal_encode(
    g: &mut Graph,
    store: &ParamStore,
    layers: &[LayerParams],
    x: TokenSet,
    ctx: &mut ForwardCtx,
) -> Result<TokenSet> {
    layers.iter().try_fold(x, |acc, layer| encoder_layer(g, store, layer, acc, None, ctx))
}
