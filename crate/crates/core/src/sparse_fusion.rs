//! Sparsification ahead of cross-modal fusion: a bidirectional strided
//! attention layer, block pooling down to `k` tokens per modality, CLS
//! merging, and assembly of the fused token set.
//!
//! Pooling blocks are contiguous and non-overlapping. With `N` tokens and
//! keep-count `k`, the stride is `s = ⌊N/k⌋`; the first `k − 1` blocks hold
//! `s` tokens and the last block absorbs the remainder, so exactly `k`
//! tokens come out for every `k ≤ N`.

use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::encoder::{encoder_layer_with_attention, ForwardCtx, LayerParams, TokenSet};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{AttentionMask, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PoolKind {
    Max,
    #[default]
    Average,
    AttentionAverage,
}

impl std::str::FromStr for PoolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Self::Max),
            "average" | "avg" => Ok(Self::Average),
            "attention-average" | "attn-average" => Ok(Self::AttentionAverage),
            other => Err(Error::Config(format!("unknown pool kind {other}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub kind: PoolKind,
    pub keep: usize,
}

impl PoolSpec {
    pub fn new(kind: PoolKind, keep: usize) -> Self {
        Self { kind, keep }
    }

    pub fn stride(&self, n: usize) -> Result<usize> {
        check_keep(n, self.keep)?;
        Ok(n / self.keep)
    }
}

fn check_keep(n: usize, keep: usize) -> Result<()> {
    if keep == 0 || keep > n {
        return Err(Error::Pool(format!("keep-count {keep} must lie in 1..={n}")));
    }
    Ok(())
}

/// The `k` contiguous pooling blocks over `n` tokens.
pub fn pool_blocks(n: usize, keep: usize) -> Result<Vec<Range<usize>>> {
    check_keep(n, keep)?;
    let s = n / keep;
    Ok((0..keep).map(|j| j * s..if j + 1 == keep { n } else { (j + 1) * s }).collect())
}

/// Strided pattern over a sequence whose row/column 0 is the CLS token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StridedMask {
    pub stride: usize,
    pub mask: Arc<AttentionMask>,
}

impl StridedMask {
    pub fn side(&self) -> usize {
        self.mask.side()
    }
}

/// Non-CLS tokens `i, j` may attend iff `|i − j| < s` or `s | (i − j)`;
/// CLS attends to and is attended by everything.
pub fn build_strided_mask(side: usize, stride: usize) -> Result<StridedMask> {
    if side == 0 || stride == 0 {
        return Err(Error::Config(format!("strided mask needs side ≥ 1 and stride ≥ 1 (got {side}, {stride})")));
    }
    let mask = AttentionMask::from_fn(side, |i, j| {
        if i == 0 || j == 0 {
            return true;
        }
        let d = i.abs_diff(j);
        d < stride || d % stride == 0
    });
    Ok(StridedMask { stride, mask: Arc::new(mask) })
}

/// One encoder layer restricted by the strided mask. Also returns the
/// per-head attention matrices.
pub fn strided_sparse_attention(
    g: &mut Graph,
    store: &ParamStore,
    layer: &LayerParams,
    x: TokenSet,
    mask: &StridedMask,
    ctx: &mut ForwardCtx,
) -> Result<(TokenSet, Vec<Var>)> {
    let n = x.len(g);
    if mask.side() != n {
        return Err(Error::shape("strided_sparse_attention", format!("mask side {} for {n} tokens", mask.side())));
    }
    let (out, weights) = encoder_layer_with_attention(g, store, layer, x.tokens, Some(&mask.mask), ctx)?;
    Ok((x.with_tokens(out), weights))
}

/// Attention received by each token: `sig(i) = Σ_h Σ_n W^h[n][i]`.
pub fn token_significance(weights: &[&Tensor]) -> Result<Vec<f64>> {
    let Some(first) = weights.first() else {
        return Err(Error::Pool("significance needs at least one head".into()));
    };
    let n = first.cols();
    let mut sig = vec![0.0; n];
    for w in weights {
        if w.cols() != n || w.rows() != n {
            return Err(Error::shape("token_significance", format!("head of shape {:?}, expected {n}x{n}", w.shape())));
        }
        for row in w.data().chunks(n) {
            for (s, v) in sig.iter_mut().zip(row) {
                *s += v;
            }
        }
    }
    Ok(sig)
}

/// Pools CLS-free tokens `z` (N×D) down to `spec.keep` rows per channel.
/// `sig` (length N) is required for attention-weighted averaging and ignored
/// otherwise; a block whose significance sums to zero falls back to a plain
/// average.
pub fn pool_tokens(g: &mut Graph, z: Var, spec: PoolSpec, sig: Option<&[f64]>) -> Result<Var> {
    let n = g.value(z).rows();
    let blocks = pool_blocks(n, spec.keep)?;
    match spec.kind {
        PoolKind::Max => g.max_block_pool(z, &blocks),
        PoolKind::Average => {
            let weights = average_weights(n, &blocks);
            g.weighted_block_pool(z, &blocks, &weights)
        }
        PoolKind::AttentionAverage => {
            let sig = sig.ok_or_else(|| Error::Pool("attention-average pooling needs token significance".into()))?;
            if sig.len() != n {
                return Err(Error::Pool(format!("{} significance values for {n} tokens", sig.len())));
            }
            if sig.iter().any(|s| *s < 0.0 || !s.is_finite()) {
                return Err(Error::Pool("significance must be finite and non-negative".into()));
            }
            let mut weights = vec![0.0; n];
            for b in &blocks {
                let total: f64 = sig[b.clone()].iter().sum();
                for t in b.clone() {
                    weights[t] = if total > 0.0 { sig[t] / total } else { 1.0 / b.len() as f64 };
                }
            }
            g.weighted_block_pool(z, &blocks, &weights)
        }
    }
}

fn average_weights(n: usize, blocks: &[Range<usize>]) -> Vec<f64> {
    let mut w = vec![0.0; n];
    for b in blocks {
        let inv = 1.0 / b.len() as f64;
        w[b.clone()].iter_mut().for_each(|x| *x = inv);
    }
    w
}

/// Sum of the per-modality CLS tokens.
pub fn merge_cls(g: &mut Graph, cls: &[Var]) -> Result<Var> {
    match cls {
        [] => Err(Error::shape("merge_cls", "no CLS tokens")),
        [one] => Ok(*one),
        many => g.add_n(many),
    }
}

/// `F = [c̃, z̃_11 … z̃_1k₁, …, z̃_M1 … z̃_Mk_M]`
pub fn fuse(g: &mut Graph, cls: Var, pooled: &[Var]) -> Result<TokenSet> {
    let mut parts = Vec::with_capacity(pooled.len() + 1);
    parts.push(cls);
    parts.extend_from_slice(pooled);
    let tokens = g.concat_rows(&parts)?;
    Ok(TokenSet { modality: usize::MAX, tokens, has_cls: true })
}
