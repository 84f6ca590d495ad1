//! Full networks: the sparse fusion transformer and the Concat / Late Fusion
//! baselines, all classifying from a CLS token through a small MLP head.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    encoder_layer, encoder_layer_with_attention, prepend_cls_with_positions, project, project_and_embed, EmbedParams,
    ForwardCtx, LayerParams, TokenSet,
};
use crate::error::{Error, Result};
use crate::mixup::MixPlan;
use crate::params::{fan_in_uniform, small_normal, ParamId, ParamStore};
use crate::sparse_fusion::{
    build_strided_mask, fuse, merge_cls, pool_tokens, strided_sparse_attention, token_significance, PoolKind,
    PoolSpec, StridedMask,
};
use crate::tensor::{softmax, Graph, Tensor, Var};

/// Number of times the fused-length invariant has been checked in this process.
pub static FUSED_LENGTH_CHECKS: AtomicU64 = AtomicU64::new(0);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityConfig {
    pub name: String,
    pub input_dim: usize,
    pub tokens: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Architecture {
    /// Unimodal encoders, strided sparse attention, pooling, dense fusion.
    #[default]
    Sft,
    /// SFT without the strided attention layer.
    SftPoolOnly,
    /// One sequence of every modality's tokens behind a single CLS. With
    /// `pool` set, the non-CLS tokens are pooled to `Σ keep` after the first layer.
    Concat { pool: Option<PoolKind> },
    /// Independent per-modality transformers; logits are summed. With
    /// `pool` set, each branch is pooled to `keep[m]` after its first layer.
    LateFusion { pool: Option<PoolKind> },
}

impl Architecture {
    pub fn is_sft(&self) -> bool {
        matches!(self, Self::Sft | Self::SftPoolOnly)
    }
}

fn default_dim() -> usize {
    40
}
fn default_heads() -> usize {
    5
}
fn default_unimodal_layers() -> usize {
    2
}
fn default_cross_layers() -> usize {
    10
}
fn default_mlp_ratio() -> usize {
    4
}
fn default_dropout() -> f64 {
    0.2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// May be left empty in configuration files and filled from a dataset.
    #[serde(default)]
    pub modalities: Vec<ModalityConfig>,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_unimodal_layers")]
    pub unimodal_layers: usize,
    #[serde(default = "default_cross_layers")]
    pub cross_layers: usize,
    /// Tokens kept per modality after pooling; empty means no reduction.
    #[serde(default)]
    pub keep: Vec<usize>,
    #[serde(default)]
    pub pool: PoolKind,
    /// Zero means "take it from the dataset".
    #[serde(default)]
    pub num_classes: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default)]
    pub architecture: Architecture,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.modalities.is_empty() {
            return bad("at least one modality is required".into());
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.keep.len() != self.modalities.len() {
            return bad(format!("{} keep-counts for {} modalities", self.keep.len(), self.modalities.len()));
        }
        for (m, k) in self.modalities.iter().zip(&self.keep) {
            if m.tokens == 0 || m.input_dim == 0 {
                return bad(format!("modality {} must have tokens and features", m.name));
            }
            if *k == 0 || *k > m.tokens {
                return bad(format!("keep-count {k} for {} outside 1..={}", m.name, m.tokens));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.unimodal_layers + self.cross_layers
    }

    pub fn total_tokens(&self) -> usize {
        self.modalities.iter().map(|m| m.tokens).sum()
    }

    pub fn fused_len(&self) -> usize {
        1 + self.keep.iter().sum::<usize>()
    }

    pub fn stride(&self, m: usize) -> usize {
        self.modalities[m].tokens / self.keep[m]
    }
}

/// Class distribution for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub logits: Vec<f64>,
    pub fused_tokens: usize,
}

impl Prediction {
    fn from_logits(logits: Vec<f64>, fused_tokens: usize) -> Self {
        Self { probs: softmax(&logits), logits, fused_tokens }
    }
}

#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl ClassifierHead {
    fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, dim: usize, classes: usize) -> Result<Self> {
        Ok(Self {
            w1: store.add(format!("{prefix}.w1"), fan_in_uniform(rng, dim, dim))?,
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[dim]))?,
            w2: store.add(format!("{prefix}.w2"), fan_in_uniform(rng, dim, classes))?,
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[classes]))?,
        })
    }

    /// `D → D → C` on the CLS row (row 0) of `tokens`.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, tokens: Var) -> Result<Var> {
        let cls = g.slice_rows(tokens, 0..1)?;
        let (w1, b1) = (g.param(store, self.w1), g.param(store, self.b1));
        let h = g.matmul(cls, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.gelu(h)?;
        let (w2, b2) = (g.param(store, self.w2), g.param(store, self.b2));
        let z = g.matmul(h, w2)?;
        g.add_row(z, b2)
    }
}

#[derive(Clone, Debug)]
pub struct SftParams {
    pub embeds: Vec<EmbedParams>,
    pub unimodal: Vec<Vec<LayerParams>>,
    /// One strided layer per modality; `None` for the pooling-only variant.
    pub sparse: Option<Vec<LayerParams>>,
    pub masks: Vec<StridedMask>,
    pub cross: Vec<LayerParams>,
    pub head: ClassifierHead,
}

#[derive(Clone, Debug)]
pub struct ConcatParams {
    pub projections: Vec<(ParamId, ParamId)>,
    pub cls: ParamId,
    pub pos: ParamId,
    pub layers: Vec<LayerParams>,
    pub head: ClassifierHead,
}

#[derive(Clone, Debug)]
pub struct Branch {
    pub embed: EmbedParams,
    pub layers: Vec<LayerParams>,
    pub head: ClassifierHead,
}

#[derive(Clone, Debug)]
pub enum Parts {
    Sft(SftParams),
    Concat(ConcatParams),
    LateFusion(Vec<Branch>),
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub parts: Parts,
}

/// Logit rows (one per sample) and the token count seen by the last stage.
#[derive(Clone, Debug)]
pub struct BatchOutput {
    pub logits: Vec<Var>,
    pub fused_tokens: usize,
}

fn stack<R: rand::Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    count: usize,
    cfg: &ModelConfig,
) -> Result<Vec<LayerParams>> {
    (0..count)
        .map(|l| LayerParams::init(store, rng, &format!("{prefix}.layer{l}"), cfg.dim, cfg.heads, cfg.mlp_ratio))
        .collect()
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = &config;
        let parts = match cfg.architecture {
            Architecture::Sft | Architecture::SftPoolOnly => {
                let mut embeds = Vec::new();
                let mut unimodal = Vec::new();
                let mut masks = Vec::new();
                for (m, mc) in cfg.modalities.iter().enumerate() {
                    let prefix = format!("sft.m{m}");
                    embeds.push(EmbedParams::init(&mut store, &mut rng, &prefix, mc.input_dim, mc.tokens, cfg.dim)?);
                    unimodal.push(stack(&mut store, &mut rng, &prefix, cfg.unimodal_layers, cfg)?);
                    masks.push(build_strided_mask(mc.tokens + 1, cfg.stride(m))?);
                }
                let sparse = if cfg.architecture == Architecture::Sft {
                    let layers = (0..cfg.modalities.len())
                        .map(|m| LayerParams::init(&mut store, &mut rng, &format!("sft.m{m}.sparse"), cfg.dim, cfg.heads, cfg.mlp_ratio))
                        .collect::<Result<Vec<_>>>()?;
                    Some(layers)
                } else {
                    None
                };
                let cross = stack(&mut store, &mut rng, "sft.cross", cfg.cross_layers, cfg)?;
                let head = ClassifierHead::init(&mut store, &mut rng, "sft.head", cfg.dim, cfg.num_classes)?;
                Parts::Sft(SftParams { embeds, unimodal, sparse, masks, cross, head })
            }
            Architecture::Concat { .. } => {
                let mut projections = Vec::new();
                for (m, mc) in cfg.modalities.iter().enumerate() {
                    let w = store.add(format!("concat.m{m}.proj.w"), fan_in_uniform(&mut rng, mc.input_dim, cfg.dim))?;
                    let b = store.add(format!("concat.m{m}.proj.b"), Tensor::zeros(&[cfg.dim]))?;
                    projections.push((w, b));
                }
                let cls = store.add("concat.cls", small_normal(&mut rng, &[1, cfg.dim], crate::encoder::EMBED_STD))?;
                let pos = store.add(
                    "concat.pos",
                    small_normal(&mut rng, &[cfg.total_tokens() + 1, cfg.dim], crate::encoder::EMBED_STD),
                )?;
                let layers = stack(&mut store, &mut rng, "concat", cfg.depth(), cfg)?;
                let head = ClassifierHead::init(&mut store, &mut rng, "concat.head", cfg.dim, cfg.num_classes)?;
                Parts::Concat(ConcatParams { projections, cls, pos, layers, head })
            }
            Architecture::LateFusion { .. } => {
                let mut branches = Vec::new();
                for (m, mc) in cfg.modalities.iter().enumerate() {
                    let prefix = format!("lf.m{m}");
                    let embed = EmbedParams::init(&mut store, &mut rng, &prefix, mc.input_dim, mc.tokens, cfg.dim)?;
                    let layers = stack(&mut store, &mut rng, &prefix, cfg.depth(), cfg)?;
                    let head = ClassifierHead::init(&mut store, &mut rng, &format!("{prefix}.head"), cfg.dim, cfg.num_classes)?;
                    branches.push(Branch { embed, layers, head });
                }
                Parts::LateFusion(branches)
            }
        };
        Ok(Self { config, params: store, parts })
    }

    pub fn check_inputs(&self, inputs: &[Tensor]) -> Result<()> {
        let mods = &self.config.modalities;
        if inputs.len() != mods.len() {
            return Err(Error::shape("model input", format!("{} modalities given, {} expected", inputs.len(), mods.len())));
        }
        for (t, m) in inputs.iter().zip(mods) {
            if t.rows() != m.tokens || t.cols() != m.input_dim {
                return Err(Error::shape(
                    "model input",
                    format!("{}: got {}x{}, expected {}x{}", m.name, t.rows(), t.cols(), m.tokens, m.input_dim),
                ));
            }
        }
        Ok(())
    }

    /// Records the forward pass for a batch of samples on `g`.
    pub fn forward_batch(
        &self,
        g: &mut Graph,
        batch: &[&[Tensor]],
        ctx: &mut ForwardCtx,
        mix: Option<&MixPlan>,
    ) -> Result<BatchOutput> {
        for inputs in batch {
            self.check_inputs(inputs)?;
        }
        if let Some(plan) = mix {
            if plan.partners.len() != batch.len() {
                return Err(Error::Config("mixup partners do not match the batch".into()));
            }
        }
        match &self.parts {
            Parts::Sft(p) => sft_forward_batch(g, &self.params, &self.config, p, batch, ctx, mix),
            Parts::Concat(p) => {
                reject_mix(mix)?;
                concat_forward_batch(g, &self.params, &self.config, p, batch, ctx)
            }
            Parts::LateFusion(b) => {
                reject_mix(mix)?;
                let mut logits = Vec::with_capacity(batch.len());
                let mut fused_tokens = 0;
                for inputs in batch {
                    let (per_branch, tokens) = late_fusion_branch_logits(g, &self.params, &self.config, b, inputs, ctx)?;
                    logits.push(if per_branch.len() == 1 { per_branch[0] } else { g.add_n(&per_branch)? });
                    fused_tokens = tokens;
                }
                Ok(BatchOutput { logits, fused_tokens })
            }
        }
    }

    pub fn predict(&self, inputs: &[Tensor], ctx: &mut ForwardCtx) -> Result<Prediction> {
        let mut preds = self.predict_batch(&[inputs], ctx)?;
        Ok(preds.remove(0))
    }

    pub fn predict_batch(&self, batch: &[&[Tensor]], ctx: &mut ForwardCtx) -> Result<Vec<Prediction>> {
        let mut g = Graph::new();
        let out = self.forward_batch(&mut g, batch, ctx, None)?;
        Ok(out
            .logits
            .iter()
            .map(|&z| Prediction::from_logits(g.value(z).data().to_vec(), out.fused_tokens))
            .collect())
    }
}

fn reject_mix(mix: Option<&MixPlan>) -> Result<()> {
    if mix.is_some() {
        return Err(Error::Config("manifold mixup is only defined for the sparse fusion architecture".into()));
    }
    Ok(())
}

fn mix_all(g: &mut Graph, states: &[Var], plan: &MixPlan, lambda_of: impl Fn(usize) -> f64) -> Result<Vec<Var>> {
    states
        .iter()
        .enumerate()
        .map(|(i, &v)| g.lerp(v, states[plan.partners[i]], lambda_of(i)))
        .collect()
}

/// SFT over a batch. `mix` interpolates layer outputs between paired samples.
pub fn sft_forward_batch(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    p: &SftParams,
    batch: &[&[Tensor]],
    ctx: &mut ForwardCtx,
    mix: Option<&MixPlan>,
) -> Result<BatchOutput> {
    let m_count = cfg.modalities.len();
    let mix_at = mix.map(|m| m.draw.layer);

    // states[m][i]: tokens of modality m for sample i.
    let mut states: Vec<Vec<Var>> = vec![Vec::with_capacity(batch.len()); m_count];
    for inputs in batch {
        for m in 0..m_count {
            states[m].push(project_and_embed(g, store, &p.embeds[m], m, &inputs[m])?.tokens);
        }
    }

    let mut last_attn: Vec<Vec<Vec<Var>>> = vec![vec![Vec::new(); batch.len()]; m_count];
    for l in 0..cfg.unimodal_layers {
        for m in 0..m_count {
            for i in 0..batch.len() {
                let (out, attn) = encoder_layer_with_attention(g, store, &p.unimodal[m][l], states[m][i], None, ctx)?;
                states[m][i] = out;
                last_attn[m][i] = attn;
            }
        }
        if mix_at == Some(l + 1) {
            let plan = mix.expect("mix layer implies plan");
            for m in 0..m_count {
                let lambda = plan.draw.lambda_for(m);
                states[m] = mix_all(g, &states[m], plan, |_| lambda)?;
            }
        }
    }

    let mut fused = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let mut cls = Vec::with_capacity(m_count);
        let mut pooled = Vec::with_capacity(m_count);
        for m in 0..m_count {
            let mut tokens = TokenSet { modality: m, tokens: states[m][i], has_cls: true };
            let mut attn = std::mem::take(&mut last_attn[m][i]);
            if let Some(sparse) = &p.sparse {
                let (out, w) = strided_sparse_attention(g, store, &sparse[m], tokens, &p.masks[m], ctx)?;
                tokens = out;
                attn = w;
            }
            let (c, pooled_m) = sparsify(g, tokens.tokens, &attn, PoolSpec::new(cfg.pool, cfg.keep[m]))?;
            cls.push(c);
            pooled.push(pooled_m);
        }
        let merged = merge_cls(g, &cls)?;
        let f = fuse(g, merged, &pooled)?;
        let len = f.len(g);
        assert_eq!(len, cfg.fused_len(), "cross-modal stage must see 1 + Σk tokens");
        FUSED_LENGTH_CHECKS.fetch_add(1, Ordering::Relaxed);
        fused.push(f.tokens);
    }

    for (t, layer) in p.cross.iter().enumerate() {
        for f in fused.iter_mut() {
            let out = encoder_layer(g, store, layer, TokenSet { modality: usize::MAX, tokens: *f, has_cls: true }, None, ctx)?;
            *f = out.tokens;
        }
        if mix_at == Some(cfg.unimodal_layers + t + 1) {
            let plan = mix.expect("mix layer implies plan");
            fused = mix_all(g, &fused, plan, |_| plan.draw.lambda_for(0))?;
        }
    }

    let logits = fused.iter().map(|&f| p.head.logits(g, store, f)).collect::<Result<Vec<_>>>()?;
    Ok(BatchOutput { logits, fused_tokens: cfg.fused_len() })
}

/// Splits CLS off `tokens` and pools the rest. Significance for
/// attention-weighted pooling comes from `attn` (the preceding layer).
fn sparsify(g: &mut Graph, tokens: Var, attn: &[Var], spec: PoolSpec) -> Result<(Var, Var)> {
    let n = g.value(tokens).rows();
    let cls = g.slice_rows(tokens, 0..1)?;
    let body = g.slice_rows(tokens, 1..n)?;
    let sig = if spec.kind == PoolKind::AttentionAverage {
        if attn.is_empty() {
            return Err(Error::Pool("attention-average pooling needs a preceding attention layer".into()));
        }
        let heads: Vec<&Tensor> = attn.iter().map(|&w| g.value(w)).collect();
        Some(token_significance(&heads)?[1..].to_vec())
    } else {
        None
    };
    let pooled = pool_tokens(g, body, spec, sig.as_deref())?;
    Ok((cls, pooled))
}

fn concat_forward_batch(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    p: &ConcatParams,
    batch: &[&[Tensor]],
    ctx: &mut ForwardCtx,
) -> Result<BatchOutput> {
    let Architecture::Concat { pool } = cfg.architecture else { unreachable!("concat parts imply concat architecture") };
    let spec = pool.map(|kind| PoolSpec::new(kind, cfg.keep.iter().sum()));
    let mut logits = Vec::with_capacity(batch.len());
    let mut final_len = 0;
    for inputs in batch {
        let mut projected = Vec::with_capacity(inputs.len());
        for (raw, &(w, b)) in inputs.iter().zip(&p.projections) {
            let raw = g.input(raw.clone())?;
            projected.push(project(g, store, w, b, raw)?);
        }
        let joined = if projected.len() == 1 { projected[0] } else { g.concat_rows(&projected)? };
        let x = prepend_cls_with_positions(g, store, p.cls, p.pos, joined)?;
        let (x, len) = pooled_stack(g, store, &p.layers, x, spec, ctx)?;
        final_len = len;
        logits.push(p.head.logits(g, store, x)?);
    }
    Ok(BatchOutput { logits, fused_tokens: final_len })
}

/// Runs `layers`, pooling the non-CLS tokens after the first layer when
/// `spec` is set (immediately, for an empty stack).
fn pooled_stack(
    g: &mut Graph,
    store: &ParamStore,
    layers: &[LayerParams],
    mut x: Var,
    spec: Option<PoolSpec>,
    ctx: &mut ForwardCtx,
) -> Result<(Var, usize)> {
    let pool_now = |g: &mut Graph, x: Var, attn: &[Var]| -> Result<Var> {
        let spec = spec.expect("checked by caller");
        let (cls, pooled) = sparsify(g, x, attn, spec)?;
        g.concat_rows(&[cls, pooled])
    };
    if layers.is_empty() && spec.is_some() {
        x = pool_now(g, x, &[])?;
    }
    for (l, layer) in layers.iter().enumerate() {
        let (out, attn) = encoder_layer_with_attention(g, store, layer, x, None, ctx)?;
        x = out;
        if l == 0 && spec.is_some() {
            x = pool_now(g, x, &attn)?;
        }
    }
    let len = g.value(x).rows();
    Ok((x, len))
}

/// Per-modality logits of the late-fusion model before summation, and the
/// total token count across branches at the final stage.
pub fn late_fusion_branch_logits(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    branches: &[Branch],
    inputs: &[Tensor],
    ctx: &mut ForwardCtx,
) -> Result<(Vec<Var>, usize)> {
    let Architecture::LateFusion { pool } = cfg.architecture else {
        return Err(Error::Config("late-fusion logits requested for another architecture".into()));
    };
    let mut out = Vec::with_capacity(branches.len());
    let mut tokens = 0;
    for (m, branch) in branches.iter().enumerate() {
        let x = project_and_embed(g, store, &branch.embed, m, &inputs[m])?.tokens;
        let spec = pool.map(|kind| PoolSpec::new(kind, cfg.keep[m]));
        let (x, len) = pooled_stack(g, store, &branch.layers, x, spec, ctx)?;
        tokens += len;
        out.push(branch.head.logits(g, store, x)?);
    }
    Ok((out, tokens))
}
