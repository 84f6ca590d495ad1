//! Reduction-factor sweeps over SFT and the pooled baselines.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cost::flops_pipeline;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::mixup::MixupConfig;
use crate::model::Architecture;
use crate::sparse_fusion::PoolKind;
use crate::train::{evaluate, train, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepVariant {
    Sft,
    /// SFT without the strided attention layer and without mixup.
    SftPo,
    /// One single-modality model per modality, max-pooled after its first layer.
    Unimodal,
    /// Concat baseline, max-pooled after its first layer.
    ConcatPool,
    /// Late fusion, each branch max-pooled after its first layer.
    LfPool,
}

impl std::str::FromStr for SweepVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sft" => Ok(Self::Sft),
            "sft-po" => Ok(Self::SftPo),
            "unimodal" => Ok(Self::Unimodal),
            "concat-pool" => Ok(Self::ConcatPool),
            "lf-pool" => Ok(Self::LfPool),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected sft, sft-po, unimodal, concat-pool or lf-pool)"
            ))),
        }
    }
}

impl SweepVariant {
    pub fn name(self) -> &'static str {
        match self {
            Self::Sft => "sft",
            Self::SftPo => "sft-po",
            Self::Unimodal => "unimodal",
            Self::ConcatPool => "concat-pool",
            Self::LfPool => "lf-pool",
        }
    }
}

/// Per-modality keep-count for a reduction factor: `max(1, N / r)`.
pub fn keep_count(tokens: usize, factor: usize) -> usize {
    (tokens / factor).max(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub variant: String,
    pub factor: usize,
    pub seed: u64,
    /// Epoch whose parameters were kept.
    pub epoch: usize,
    pub top1: f64,
    pub map: f64,
    pub gflops: f64,
}

/// A single training job of a sweep: a labelled configuration and the data it sees.
pub struct SweepCell {
    pub label: String,
    pub config: TrainConfig,
    pub data: Dataset,
}

/// Expands one variant at one factor into its training jobs.
pub fn cells(base: &TrainConfig, data: &Dataset, variant: SweepVariant, factor: usize) -> Result<Vec<SweepCell>> {
    if factor == 0 {
        return Err(Error::Config("reduction factors must be at least 1".into()));
    }
    let mut cfg = base.clone();
    cfg.model.modalities = data.manifest.model_modalities();
    cfg.model.num_classes = data.manifest.num_classes;
    cfg.model.keep = cfg.model.modalities.iter().map(|m| keep_count(m.tokens, factor)).collect();
    let baseline = |mut cfg: TrainConfig, arch| {
        cfg.model.architecture = arch;
        cfg.mixup = MixupConfig { enabled: false, ..cfg.mixup };
        cfg
    };
    let max_pool = Some(PoolKind::Max);
    let single = |cfg: TrainConfig, label: String| SweepCell { label, config: cfg, data: data.clone() };
    Ok(match variant {
        SweepVariant::Sft => {
            cfg.model.architecture = Architecture::Sft;
            vec![single(cfg, variant.name().into())]
        }
        SweepVariant::SftPo => vec![single(baseline(cfg, Architecture::SftPoolOnly), variant.name().into())],
        SweepVariant::ConcatPool => {
            vec![single(baseline(cfg, Architecture::Concat { pool: max_pool }), variant.name().into())]
        }
        SweepVariant::LfPool => {
            vec![single(baseline(cfg, Architecture::LateFusion { pool: max_pool }), variant.name().into())]
        }
        SweepVariant::Unimodal => (0..cfg.model.modalities.len())
            .map(|m| {
                let mut c = baseline(cfg.clone(), Architecture::LateFusion { pool: max_pool });
                c.model.modalities = vec![cfg.model.modalities[m].clone()];
                c.model.keep = vec![cfg.model.keep[m]];
                let label = format!("unimodal-{}", cfg.model.modalities[m].name);
                Ok(SweepCell { label, config: c, data: data.select_modalities(&[m])? })
            })
            .collect::<Result<Vec<_>>>()?,
    })
}

/// Trains one cell for `seed` and scores it on the test split (validation if
/// the dataset has no test split).
pub fn run_cell(cell: &SweepCell, factor: usize, seed: u64) -> Result<MetricsRow> {
    let outcome = train(&cell.config, &cell.data, seed)?;
    let split = if cell.data.split(Split::Test).is_empty() { Split::Val } else { Split::Test };
    let m = evaluate(&outcome.model, &cell.data, cell.data.split(split), cell.config.batch_size)?;
    let cost = flops_pipeline(&cell.config.model, cell.config.model.architecture)?;
    Ok(MetricsRow {
        variant: cell.label.clone(),
        factor,
        seed,
        epoch: outcome.best_epoch,
        top1: m.top1,
        map: m.map,
        gflops: cost.gflops(),
    })
}

/// One row per (variant, factor, seed); unimodal expands to one variant per modality.
pub fn reduction_sweep(
    base: &TrainConfig,
    data: &Dataset,
    factors: &[usize],
    variants: &[SweepVariant],
    seeds: &[u64],
) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for &variant in variants {
        for &factor in factors {
            for cell in cells(base, data, variant, factor)? {
                for &seed in seeds {
                    let row = run_cell(&cell, factor, seed)?;
                    log::info!("{} x{factor} seed {seed}: top1 {:.3}", row.variant, row.top1);
                    rows.push(row);
                }
            }
        }
    }
    Ok(rows)
}

pub const CSV_HEADER: &str = "variant,factor,seed,epoch,top1,map,gflops";

/// Writes `rows` as CSV with [`CSV_HEADER`].
pub fn write_csv<W: Write>(rows: &[MetricsRow], w: W) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    if rows.is_empty() {
        out.write_record(CSV_HEADER.split(','))?;
    }
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryCell {
    pub variant: String,
    pub factor: usize,
    pub runs: usize,
    pub top1_mean: f64,
    pub top1_std: f64,
    pub map_mean: f64,
    pub map_std: f64,
    pub gflops: f64,
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aggregates rows per (variant, factor) in first-appearance order.
pub fn summarize(rows: &[MetricsRow]) -> Vec<SummaryCell> {
    let mut keys: Vec<(String, usize)> = Vec::new();
    for r in rows {
        let key = (r.variant.clone(), r.factor);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(variant, factor)| {
            let cell: Vec<&MetricsRow> = rows.iter().filter(|r| r.variant == variant && r.factor == factor).collect();
            let (top1_mean, top1_std) = mean_std(&cell.iter().map(|r| r.top1).collect::<Vec<_>>());
            let (map_mean, map_std) = mean_std(&cell.iter().map(|r| r.map).collect::<Vec<_>>());
            SummaryCell { variant, factor, runs: cell.len(), top1_mean, top1_std, map_mean, map_std, gflops: cell[0].gflops }
        })
        .collect()
}
