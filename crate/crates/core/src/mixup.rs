//! Multimodal manifold mixup.
//!
//! One layer `l ∈ [1, L+T]` is drawn per batch. In the unimodal stage
//! (`l ≤ L`) each modality gets its own `λ_m ~ Beta(α, α)` and the label is
//! mixed with their mean; in the cross-modal stage a single `λ` is used. The
//! mixing partner of every sample is drawn as a permutation of its batch.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixupConfig {
    pub alpha: f64,
    pub warmup_epochs: usize,
    pub enabled: bool,
}

impl Default for MixupConfig {
    fn default() -> Self {
        Self { alpha: 0.3, warmup_epochs: 5, enabled: true }
    }
}

impl MixupConfig {
    pub fn disabled() -> Self {
        Self { enabled: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("mixup alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixupDraw {
    /// 1-based layer whose output is mixed.
    pub layer: usize,
    /// One weight per modality when `layer ≤ L`, otherwise a single weight.
    pub lambdas: Vec<f64>,
    /// Label weight `λ̄`.
    pub mean: f64,
}

impl MixupDraw {
    /// Weight applied to modality `m` (the shared weight in the cross-modal stage).
    pub fn lambda_for(&self, m: usize) -> f64 {
        if self.lambdas.len() == 1 {
            self.lambdas[0]
        } else {
            self.lambdas[m]
        }
    }
}

/// `None` during warmup, when disabled, or for a network without layers.
pub fn sample_mixup_draw<R: Rng + ?Sized>(
    cfg: &MixupConfig,
    epoch: usize,
    unimodal_layers: usize,
    cross_layers: usize,
    modalities: usize,
    rng: &mut R,
) -> Result<Option<MixupDraw>> {
    let depth = unimodal_layers + cross_layers;
    if !cfg.enabled || epoch < cfg.warmup_epochs || depth == 0 {
        return Ok(None);
    }
    cfg.validate()?;
    let beta = Beta::new(cfg.alpha, cfg.alpha).map_err(|e| Error::Config(format!("beta distribution: {e}")))?;
    let layer = rng.random_range(1..=depth);
    let count = if layer <= unimodal_layers { modalities } else { 1 };
    let lambdas: Vec<f64> = (0..count).map(|_| beta.sample(rng)).collect();
    let mean = lambdas.iter().sum::<f64>() / count as f64;
    Ok(Some(MixupDraw { layer, lambdas, mean }))
}

/// `λ·v_i + (1 − λ)·v_j` over every token of the representation.
pub fn mix_latent(g: &mut Graph, vi: Var, vj: Var, lambda: f64) -> Result<Var> {
    g.lerp(vi, vj, lambda)
}

/// `λ̄·y_i + (1 − λ̄)·y_j`
pub fn mix_labels(yi: &[f64], yj: &[f64], mean_lambda: f64) -> Result<Vec<f64>> {
    if yi.len() != yj.len() {
        return Err(Error::shape("mix_labels", format!("{} vs {} classes", yi.len(), yj.len())));
    }
    let mu = 1.0 - mean_lambda;
    Ok(yi.iter().zip(yj).map(|(a, b)| mean_lambda * a + mu * b).collect())
}

pub fn one_hot(label: usize, classes: usize) -> Vec<f64> {
    let mut y = vec![0.0; classes];
    y[label] = 1.0;
    y
}

/// A draw together with the partner index of every sample in the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct MixPlan {
    pub draw: MixupDraw,
    pub partners: Vec<usize>,
}

impl MixPlan {
    pub fn sample<R: Rng + ?Sized>(draw: MixupDraw, batch: usize, rng: &mut R) -> Self {
        let mut partners: Vec<usize> = (0..batch).collect();
        partners.shuffle(rng);
        Self { draw, partners }
    }
}
