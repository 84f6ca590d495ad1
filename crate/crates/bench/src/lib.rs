//! Shared fixtures for the benchmarks.

use sft_core::model::{Architecture, ModalityConfig, ModelConfig};
use sft_core::sparse_fusion::PoolKind;
use sft_core::tensor::Tensor;

/// Deterministic `rows × cols` input with values in `[-1, 1)`.
pub fn ramp(rows: usize, cols: usize, phase: usize) -> Tensor {
    let data = (0..rows * cols).map(|i| (((i + phase) * 7919) % 2000) as f64 / 1000.0 - 1.0).collect();
    Tensor::matrix(rows, cols, data).expect("shape matches")
}

/// Three 64-token modalities at reduction factor `factor`, small enough to run per iteration.
pub fn small_config(architecture: Architecture, factor: usize) -> ModelConfig {
    let modalities: Vec<ModalityConfig> =
        (0..3).map(|m| ModalityConfig { name: format!("m{m}"), input_dim: 6, tokens: 64 }).collect();
    ModelConfig {
        keep: modalities.iter().map(|m| (m.tokens / factor).max(1)).collect(),
        modalities,
        dim: 16,
        heads: 2,
        unimodal_layers: 1,
        cross_layers: 1,
        pool: PoolKind::Average,
        num_classes: 6,
        dropout: 0.1,
        mlp_ratio: 2,
        architecture,
    }
}

/// Model configuration with the token counts and keep-counts of the large audio-visual setting.
pub fn reference_config(architecture: Architecture) -> ModelConfig {
    let modalities = vec![
        ModalityConfig { name: "rgb".into(), input_dim: 1024, tokens: 38 },
        ModalityConfig { name: "flow".into(), input_dim: 1024, tokens: 38 },
        ModalityConfig { name: "audio".into(), input_dim: 128, tokens: 1200 },
    ];
    ModelConfig {
        modalities,
        dim: 40,
        heads: 5,
        unimodal_layers: 2,
        cross_layers: 10,
        keep: vec![12, 12, 20],
        pool: PoolKind::Average,
        num_classes: 100,
        dropout: 0.2,
        mlp_ratio: 4,
        architecture,
    }
}
