//! Analytical flop counts for transformer blocks.
//!
//! Only attention and MLP blocks are counted: `φ_MHA = 4nd² + 2n²d` and
//! `φ_MLP = 2nd² + 4nd`. A strided-sparse layer replaces the `2n²d` score
//! term with `2·|allowed|·d`, where `|allowed|` is the number of admitted
//! entries of its mask. Input projections, heads and pooling are ignored.

use serde::Serialize;

use crate::error::Result;
use crate::model::{Architecture, ModelConfig};
use crate::sparse_fusion::build_strided_mask;

pub fn flops_mha(n: u64, d: u64) -> u64 {
    4 * n * d * d + 2 * n * n * d
}

pub fn flops_mlp(n: u64, d: u64) -> u64 {
    2 * n * d * d + 4 * n * d
}

/// Multi-head attention restricted to `allowed` query/key pairs.
pub fn flops_sparse_mha(n: u64, d: u64, allowed: u64) -> u64 {
    4 * n * d * d + 2 * allowed * d
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case", tag = "type")]
pub enum StageKind {
    Dense,
    StridedSparse { allowed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct StageShape {
    pub n: u64,
    pub d: u64,
    pub layers: u64,
    pub kind: StageKind,
}

impl StageShape {
    pub fn dense(n: usize, d: usize, layers: usize) -> Self {
        Self { n: n as u64, d: d as u64, layers: layers as u64, kind: StageKind::Dense }
    }

    pub fn flops_per_layer(&self) -> u64 {
        let attn = match self.kind {
            StageKind::Dense => flops_mha(self.n, self.d),
            StageKind::StridedSparse { allowed } => flops_sparse_mha(self.n, self.d, allowed),
        };
        attn + flops_mlp(self.n, self.d)
    }

    pub fn flops(&self) -> u64 {
        self.layers * self.flops_per_layer()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageCost {
    pub label: String,
    pub shape: StageShape,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub architecture: Architecture,
    pub stages: Vec<StageCost>,
    pub total: u64,
}

impl CostReport {
    fn new(architecture: Architecture, stages: Vec<(String, StageShape)>) -> Self {
        let stages: Vec<StageCost> = stages
            .into_iter()
            .map(|(label, shape)| StageCost { label, flops: shape.flops(), shape })
            .collect();
        let total = stages.iter().map(|s| s.flops).sum();
        Self { architecture, stages, total }
    }

    pub fn gflops(&self) -> f64 {
        self.total as f64 / 1e9
    }

    /// How many times cheaper `self` is than `reference`.
    pub fn reduction_vs(&self, reference: &CostReport) -> f64 {
        reference.total as f64 / self.total as f64
    }
}

/// Flops of `config` run as `architecture` (which overrides the configured one).
pub fn flops_pipeline(config: &ModelConfig, architecture: Architecture) -> Result<CostReport> {
    let cfg = ModelConfig { architecture, ..config.clone() };
    cfg.validate()?;
    let d = cfg.dim;
    let depth = cfg.depth();
    let mut stages = Vec::new();
    match architecture {
        Architecture::Sft | Architecture::SftPoolOnly => {
            for (m, mc) in cfg.modalities.iter().enumerate() {
                let n = mc.tokens + 1;
                stages.push((format!("{}.unimodal", mc.name), StageShape::dense(n, d, cfg.unimodal_layers)));
                if architecture == Architecture::Sft {
                    let mask = build_strided_mask(n, cfg.stride(m))?;
                    let allowed = mask.mask.allowed_count() as u64;
                    let shape = StageShape { kind: StageKind::StridedSparse { allowed }, ..StageShape::dense(n, d, 1) };
                    stages.push((format!("{}.sparse", mc.name), shape));
                }
            }
            stages.push(("cross".into(), StageShape::dense(cfg.fused_len(), d, cfg.cross_layers)));
        }
        Architecture::Concat { pool } => {
            let n = cfg.total_tokens() + 1;
            match pool {
                Some(_) if depth > 0 => {
                    stages.push(("concat.first".into(), StageShape::dense(n, d, 1)));
                    stages.push(("concat.pooled".into(), StageShape::dense(cfg.fused_len(), d, depth - 1)));
                }
                _ => stages.push(("concat".into(), StageShape::dense(n, d, depth))),
            }
        }
        Architecture::LateFusion { pool } => {
            for (mc, &k) in cfg.modalities.iter().zip(&cfg.keep) {
                let n = mc.tokens + 1;
                match pool {
                    Some(_) if depth > 0 => {
                        stages.push((format!("{}.first", mc.name), StageShape::dense(n, d, 1)));
                        stages.push((format!("{}.pooled", mc.name), StageShape::dense(k + 1, d, depth - 1)));
                    }
                    _ => stages.push((mc.name.clone(), StageShape::dense(n, d, depth))),
                }
            }
        }
    }
    Ok(CostReport::new(architecture, stages))
}
