use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use sft_bench::reference_config;
use sft_core::cost::flops_pipeline;
use sft_core::model::Architecture;
use sft_core::sparse_fusion::build_strided_mask;

fn cost(c: &mut Criterion) {
    let sft = reference_config(Architecture::Sft);
    c.bench_function("flops_pipeline/sft", |b| b.iter(|| flops_pipeline(black_box(&sft), Architecture::Sft).unwrap()));
    c.bench_function("strided_mask/1201", |b| b.iter(|| build_strided_mask(black_box(1201), 60).unwrap()));
}

criterion_group!(benches, cost);
criterion_main!(benches);
