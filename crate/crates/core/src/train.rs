//! Mini-batch training with Adam, step or plateau learning-rate decay,
//! optional manifold mixup, and best-validation-loss parameter retention.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::encoder::ForwardCtx;
use crate::error::{Error, Result};
use crate::metrics::{mean_average_precision, top1};
use crate::mixup::{mix_labels, one_hot, sample_mixup_draw, MixPlan, MixupConfig};
use crate::model::{Architecture, Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LrSchedule {
    /// Multiply by `factor` every `every` epochs.
    Step { every: usize, factor: f64 },
    /// Multiply by `factor` once validation loss has not improved for `patience` epochs.
    Plateau { patience: usize, factor: f64 },
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self::Step { every: 10, factor: 0.1 }
    }
}

fn default_lr() -> f64 {
    1e-4
}
fn default_batch() -> usize {
    24
}
fn default_epochs() -> usize {
    30
}
fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub mixup: MixupConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Fraction of training labels replaced by a different class.
    #[serde(default)]
    pub label_noise: f64,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            model,
            lr: default_lr(),
            schedule: LrSchedule::default(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            mixup: MixupConfig::default(),
            seeds: default_seeds(),
            label_noise: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch size and epoch count must be at least 1".into());
        }
        match self.schedule {
            LrSchedule::Step { every, factor } | LrSchedule::Plateau { patience: every, factor } => {
                if every == 0 || !(factor > 0.0 && factor <= 1.0) {
                    return bad(format!("invalid learning-rate schedule {:?}", self.schedule));
                }
            }
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return bad(format!("label noise {} outside [0, 1)", self.label_noise));
        }
        if self.mixup.enabled {
            self.mixup.validate()?;
            if self.model.architecture != Architecture::Sft {
                return bad("manifold mixup requires the sft architecture; set mixup.enabled to false".into());
            }
        }
        Ok(())
    }

    /// Fills modalities, class count and keep-counts left unset in the
    /// configuration from the dataset manifest.
    pub fn bind_dataset(&mut self, data: &Dataset) {
        let m = &mut self.model;
        if m.modalities.is_empty() {
            m.modalities = data.manifest.model_modalities();
        }
        if m.num_classes == 0 {
            m.num_classes = data.manifest.num_classes;
        }
        if m.keep.is_empty() {
            m.keep = m.modalities.iter().map(|mc| mc.tokens).collect();
        }
    }

    /// Step-schedule learning rate at `epoch` (plateau schedules start from `lr`).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            LrSchedule::Step { every, factor } => self.lr * factor.powi((epoch / every) as i32),
            LrSchedule::Plateau { .. } => self.lr,
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grads = p.grad.data();
            let values = p.value.data_mut();
            for i in 0..values.len() {
                let g = grads[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                values[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut z = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        z = z.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_DROPOUT: u64 = 3;
const STREAM_MIXUP: u64 = 4;
const STREAM_LABELS: u64 = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub loss: f64,
    pub top1: f64,
    pub map: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val: EvalMetrics,
    /// Batches on which mixup was applied.
    pub mixup_batches: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Training labels with `fraction` of them moved to a different class.
pub fn noisy_labels(labels: &[usize], classes: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, STREAM_LABELS]));
    let flips = (fraction * labels.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(&mut rng);
    let mut out = labels.to_vec();
    for &i in &order[..flips] {
        let shift = rng.random_range(1..classes);
        out[i] = (labels[i] + shift) % classes;
    }
    out
}

pub fn batch_inputs<'a>(data: &'a Dataset, idx: &[usize]) -> Vec<&'a [Tensor]> {
    idx.iter().map(|&i| data.features[i].as_slice()).collect()
}

pub fn mean_loss(g: &mut Graph, logits: &[Var], targets: &[Vec<f64>]) -> Result<Var> {
    let losses = logits
        .iter()
        .zip(targets)
        .map(|(&z, y)| g.softmax_cross_entropy(z, y))
        .collect::<Result<Vec<_>>>()?;
    let total = if losses.len() == 1 { losses[0] } else { g.add_n(&losses)? };
    g.scale(total, 1.0 / losses.len() as f64)
}

/// Loss, Top1 and mAP of `model` on the samples `idx`, in eval mode.
pub fn evaluate(model: &Model, data: &Dataset, idx: &[usize], batch: usize) -> Result<EvalMetrics> {
    if idx.is_empty() {
        return Err(Error::Metric("evaluation split is empty".into()));
    }
    let classes = model.config.num_classes;
    let mut probs = Vec::with_capacity(idx.len());
    let mut loss = 0.0;
    for chunk in idx.chunks(batch.max(1)) {
        let preds = model.predict_batch(&batch_inputs(data, chunk), &mut ForwardCtx::eval())?;
        for (p, &i) in preds.into_iter().zip(chunk) {
            loss -= p.probs[data.label(i)].max(f64::MIN_POSITIVE).ln();
            probs.push(p.probs);
        }
    }
    let labels: Vec<usize> = idx.iter().map(|&i| data.label(i)).collect();
    Ok(EvalMetrics {
        loss: loss / idx.len() as f64,
        top1: top1(&probs, &labels)?,
        map: mean_average_precision(&probs, &labels, classes)?.map,
    })
}

fn check_dataset(cfg: &ModelConfig, data: &Dataset) -> Result<()> {
    if data.manifest.num_classes != cfg.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model expects {}",
            data.manifest.num_classes, cfg.num_classes
        )));
    }
    if data.manifest.model_modalities() != cfg.modalities {
        return Err(Error::Config("dataset modalities do not match the model configuration".into()));
    }
    Ok(())
}

/// Trains one model from `seed` and returns the best-validation parameters.
pub fn train(cfg: &TrainConfig, data: &Dataset, seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dataset(&cfg.model, data)?;
    let train_idx = data.split(Split::Train).to_vec();
    if train_idx.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let val_idx = if data.split(Split::Val).is_empty() {
        log::warn!("validation split is empty; selecting parameters on training loss");
        train_idx.clone()
    } else {
        data.split(Split::Val).to_vec()
    };

    let classes = cfg.model.num_classes;
    let train_labels = {
        let clean: Vec<usize> = train_idx.iter().map(|&i| data.label(i)).collect();
        noisy_labels(&clean, classes, cfg.label_noise, seed)
    };

    let mut model = Model::new(cfg.model.clone(), mix_seed(&[seed, STREAM_INIT]))?;
    let mut adam = Adam::new(&model.params);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut lr = cfg.lr;
    let mut since_improved = 0;
    let mut order: Vec<usize> = (0..train_idx.len()).collect();

    for epoch in 0..cfg.epochs {
        if let LrSchedule::Step { .. } = cfg.schedule {
            lr = cfg.lr_at(epoch);
        }
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, STREAM_SHUFFLE, epoch as u64])));
        let mut loss_sum = 0.0;
        let mut mixup_batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let idx: Vec<usize> = chunk.iter().map(|&k| train_idx[k]).collect();
            let labels: Vec<Vec<f64>> = chunk.iter().map(|&k| one_hot(train_labels[k], classes)).collect();
            let stream = |s: u64| mix_seed(&[seed, s, epoch as u64, b as u64]);

            let mut mix_rng = ChaCha8Rng::seed_from_u64(stream(STREAM_MIXUP));
            let plan = if cfg.model.architecture == Architecture::Sft {
                sample_mixup_draw(
                    &cfg.mixup,
                    epoch,
                    cfg.model.unimodal_layers,
                    cfg.model.cross_layers,
                    cfg.model.modalities.len(),
                    &mut mix_rng,
                )?
                .map(|draw| MixPlan::sample(draw, idx.len(), &mut mix_rng))
            } else {
                None
            };
            let targets = match &plan {
                Some(p) => {
                    mixup_batches += 1;
                    (0..labels.len())
                        .map(|i| mix_labels(&labels[i], &labels[p.partners[i]], p.draw.mean))
                        .collect::<Result<Vec<_>>>()?
                }
                None => labels,
            };

            let mut ctx = ForwardCtx::train(cfg.model.dropout, stream(STREAM_DROPOUT));
            let mut g = Graph::new();
            let step = (|| -> Result<f64> {
                let out = model.forward_batch(&mut g, &batch_inputs(data, &idx), &mut ctx, plan.as_ref())?;
                let loss = mean_loss(&mut g, &out.logits, &targets)?;
                g.backward(loss)?;
                Ok(g.value(loss).item())
            })();
            let loss = match step {
                Ok(l) if l.is_finite() => l,
                Ok(l) => return Err(Error::Diverged { epoch, batch: b, loss: l }),
                Err(Error::NonFinite { .. }) => return Err(Error::Diverged { epoch, batch: b, loss: f64::NAN }),
                Err(e) => return Err(e),
            };
            loss_sum += loss * idx.len() as f64;
            model.params.zero_grad();
            g.accumulate_param_grads(&mut model.params);
            adam.step(&mut model.params, lr);
        }

        let val = evaluate(&model, data, &val_idx, cfg.batch_size)?;
        log::debug!("epoch {epoch}: lr {lr:.2e} val loss {:.4} top1 {:.3}", val.loss, val.top1);
        let improved = best.as_ref().is_none_or(|(l, _, _)| val.loss < *l);
        if improved {
            best = Some((val.loss, epoch, model.params.clone()));
            since_improved = 0;
        } else {
            since_improved += 1;
        }
        if let LrSchedule::Plateau { patience, factor } = cfg.schedule {
            if since_improved >= patience {
                lr *= factor;
                since_improved = 0;
            }
        }
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train_idx.len() as f64,
            val,
            mixup_batches,
        });
    }

    let (_, best_epoch, params) = best.expect("at least one epoch");
    model.params.copy_values_from(&params)?;
    Ok(TrainOutcome { model, history, best_epoch })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModalityConfig;
    use crate::sparse_fusion::PoolKind;

    fn model_config(arch: Architecture) -> ModelConfig {
        ModelConfig {
            modalities: vec![ModalityConfig { name: "a".into(), input_dim: 2, tokens: 4 }],
            dim: 4,
            heads: 1,
            unimodal_layers: 1,
            cross_layers: 1,
            keep: vec![2],
            pool: PoolKind::Average,
            num_classes: 2,
            dropout: 0.0,
            mlp_ratio: 1,
            architecture: arch,
        }
    }

    #[test]
    fn step_schedule() {
        let cfg = TrainConfig::new(model_config(Architecture::Sft));
        assert_eq!(cfg.lr_at(0), 1e-4);
        assert_eq!(cfg.lr_at(9), 1e-4);
        assert!((cfg.lr_at(10) - 1e-5).abs() < 1e-20);
        assert!((cfg.lr_at(25) - 1e-6).abs() < 1e-21);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::new(model_config(Architecture::Concat { pool: None }));
        assert!(cfg.validate().is_err(), "mixup on a baseline");
        cfg.mixup.enabled = false;
        cfg.validate().unwrap();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::new(model_config(Architecture::Sft));
        cfg.lr = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::new(model_config(Architecture::Sft));
        cfg.label_noise = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![1.0, -2.0, 0.5])).unwrap();
        store.get_mut(id).grad = Tensor::vector(vec![3.0, -0.1, 0.0]);
        let mut adam = Adam::new(&store);
        adam.step(&mut store, 0.01);
        let v = store.value(id).data();
        assert!((v[0] - 0.99).abs() < 1e-9);
        assert!((v[1] + 1.99).abs() < 1e-9);
        assert_eq!(v[2], 0.5);
    }

    #[test]
    fn label_noise_flips_exact_count() {
        let labels: Vec<usize> = (0..100).map(|i| i % 4).collect();
        let noisy = noisy_labels(&labels, 4, 0.1, 3);
        let flipped = labels.iter().zip(&noisy).filter(|(a, b)| a != b).count();
        assert_eq!(flipped, 10);
        assert!(noisy.iter().all(|&y| y < 4));
        assert_eq!(noisy, noisy_labels(&labels, 4, 0.1, 3));
        assert_eq!(noisy_labels(&labels, 4, 0.0, 3), labels);
    }

    #[test]
    fn seed_mixing_separates_streams() {
        assert_ne!(mix_seed(&[0, 1]), mix_seed(&[1, 0]));
        assert_ne!(mix_seed(&[0, 1, 2]), mix_seed(&[0, 1, 3]));
        assert_eq!(mix_seed(&[5, 5]), mix_seed(&[5, 5]));
    }
}
