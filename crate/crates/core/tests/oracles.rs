mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;
use sft_core::encoder::{encoder_layer_with_attention, ForwardCtx, LayerParams};
use sft_core::mixup::one_hot;
use sft_core::model::{Architecture, ClassifierHead, Model, ModelConfig, Parts};
use sft_core::params::ParamStore;
use sft_core::sparse_fusion::{build_strided_mask, pool_blocks, pool_tokens, token_significance, PoolKind, PoolSpec};
use sft_core::tensor::{Graph, Tensor};

fn config(shapes: &[(usize, usize)], keep: Vec<usize>, pool: PoolKind, architecture: Architecture) -> ModelConfig {
    ModelConfig {
        modalities: modalities(shapes),
        dim: 8,
        heads: 2,
        unimodal_layers: 1,
        cross_layers: 2,
        keep,
        pool,
        num_classes: 3,
        dropout: 0.0,
        mlp_ratio: 2,
        architecture,
    }
}

fn dense(_: usize, _: usize) -> bool {
    true
}

fn tensor_rows(store: &ParamStore, id: sft_core::params::ParamId) -> Rows {
    rows_of(store.value(id))
}

fn head_logits(store: &ParamStore, head: &ClassifierHead, cls: &[f64]) -> Vec<f64> {
    let affine = |x: &[f64], w: &Tensor, b: &Tensor| -> Vec<f64> {
        (0..w.cols()).map(|j| b.data()[j] + x.iter().enumerate().map(|(p, v)| v * w.at(p, j)).sum::<f64>()).collect()
    };
    let h: Vec<f64> = affine(cls, store.value(head.w1), store.value(head.b1))
        .into_iter()
        .map(|x| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh()))
        .collect();
    affine(&h, store.value(head.w2), store.value(head.b2))
}

/// Block max or block mean of the CLS-free rows, written with plain loops.
fn reference_pool(z: &Rows, keep: usize, kind: PoolKind) -> Rows {
    let n = z.len();
    let s = n / keep;
    (0..keep)
        .map(|j| {
            let end = if j + 1 == keep { n } else { (j + 1) * s };
            let block = &z[j * s..end];
            (0..z[0].len())
                .map(|c| match kind {
                    PoolKind::Max => block.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max),
                    _ => block.iter().map(|r| r[c]).sum::<f64>() / block.len() as f64,
                })
                .collect()
        })
        .collect()
}

/// The whole SFT forward pass, evaluated without the graph.
fn reference_sft(model: &Model, inputs: &[Tensor]) -> Vec<f64> {
    let Parts::Sft(p) = &model.parts else { panic!("sft parts") };
    let cfg = &model.config;
    let store = &model.params;
    let mut cls = vec![0.0; cfg.dim];
    let mut pooled: Rows = Vec::new();
    for (m, raw) in inputs.iter().enumerate() {
        let e = &p.embeds[m];
        let w = store.value(e.proj_w);
        let b = store.value(e.proj_b);
        let pos = tensor_rows(store, e.pos);
        let mut x: Rows = vec![store.value(e.cls).data().to_vec()];
        for t in 0..raw.rows() {
            x.push((0..cfg.dim).map(|j| b.data()[j] + (0..raw.cols()).map(|f| raw.at(t, f) * w.at(f, j)).sum::<f64>()).collect());
        }
        for (t, row) in x.iter_mut().enumerate() {
            for (v, q) in row.iter_mut().zip(&pos[t]) {
                *v += q;
            }
        }
        for layer in &p.unimodal[m] {
            x = reference_layer(store, layer, &x, &dense).0;
        }
        if let Some(sparse) = &p.sparse {
            x = reference_layer(store, &sparse[m], &x, &strided_allowed(cfg.stride(m))).0;
        }
        for (c, v) in cls.iter_mut().zip(&x[0]) {
            *c += v;
        }
        pooled.extend(reference_pool(&x[1..].to_vec(), cfg.keep[m], cfg.pool));
    }
    let mut fused = vec![cls];
    fused.extend(pooled);
    assert_eq!(fused.len(), cfg.fused_len());
    for layer in &p.cross {
        fused = reference_layer(store, layer, &fused, &dense).0;
    }
    head_logits(store, &p.head, &fused[0])
}

#[test]
fn encoder_layer_matches_reference() {
    for (n, d, heads) in [(1, 4, 1), (5, 8, 2), (9, 12, 3)] {
        let mut store = ParamStore::new();
        let layer = LayerParams::init(&mut store, &mut ChaCha8Rng::seed_from_u64(n as u64), "l", d, heads, 3).unwrap();
        let x = random_matrix(n, d, 7);
        let mut g = Graph::new();
        let input = g.input(x.clone()).unwrap();
        let (out, weights) = encoder_layer_with_attention(&mut g, &store, &layer, input, None, &mut ForwardCtx::eval()).unwrap();
        let (reference, ref_weights) = reference_layer(&store, &layer, &rows_of(&x), &dense);
        assert!(max_abs_diff(&rows_of(g.value(out)), &reference) < 1e-12);
        for (w, r) in weights.iter().zip(&ref_weights) {
            assert!(max_abs_diff(&rows_of(g.value(*w)), r) < 1e-14);
        }
    }
}

#[test]
fn sft_forward_matches_reference() {
    for (pool, arch) in [
        (PoolKind::Average, Architecture::Sft),
        (PoolKind::Max, Architecture::Sft),
        (PoolKind::Average, Architecture::SftPoolOnly),
    ] {
        let model = Model::new(config(&[(7, 3), (10, 2)], vec![3, 4], pool, arch), 21).unwrap();
        let inputs = vec![random_matrix(7, 3, 1), random_matrix(10, 2, 2)];
        let got = model.predict(&inputs, &mut ForwardCtx::eval()).unwrap();
        let want = reference_sft(&model, &inputs);
        let err = got.logits.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "{pool:?} {arch:?}: logits differ by {err:e}");
        assert_eq!(got.fused_tokens, 1 + 3 + 4);
    }
}

#[test]
fn baselines_pass_gradient_check() {
    let shapes = [(5, 3), (4, 2)];
    for arch in [
        Architecture::Concat { pool: None },
        Architecture::Concat { pool: Some(PoolKind::Max) },
        Architecture::LateFusion { pool: None },
        Architecture::LateFusion { pool: Some(PoolKind::Average) },
        Architecture::SftPoolOnly,
    ] {
        let mut cfg = config(&shapes, vec![2, 2], PoolKind::Average, arch);
        cfg.dim = 4;
        cfg.cross_layers = 1;
        let mut model = Model::new(cfg, 5).unwrap();
        let samples: Vec<Vec<Tensor>> = (0..2).map(|i| vec![random_matrix(5, 3, i), random_matrix(4, 2, 10 + i)]).collect();
        let batch: Vec<&[Tensor]> = samples.iter().map(|s| s.as_slice()).collect();
        let r = grad_check(&mut model, &batch, &[one_hot(1, 3), one_hot(2, 3)], 1e-5, 1e-6);
        assert!(r.worst < 1e-4, "{arch:?}: {:e} at {}", r.worst, r.worst_param);
    }
}

#[test]
fn significance_is_column_sum_over_heads() {
    let a = Tensor::from_rows(&[&[0.5, 0.5, 0.0], &[0.2, 0.3, 0.5], &[1.0, 0.0, 0.0]]).unwrap();
    let b = Tensor::from_rows(&[&[0.1, 0.1, 0.8], &[0.0, 1.0, 0.0], &[0.3, 0.3, 0.4]]).unwrap();
    let sig = token_significance(&[&a, &b]).unwrap();
    let want: Vec<f64> = (0..3).map(|j| (0..3).map(|i| a.at(i, j) + b.at(i, j)).sum()).collect();
    assert_eq!(sig, want);
    assert!(token_significance(&[]).is_err());
}

proptest! {
    #[test]
    fn strided_mask_matches_definition(n in 1usize..40, s in 1usize..45) {
        let mask = build_strided_mask(n + 1, s).unwrap();
        let allowed = strided_allowed(s);
        let mut count = 0;
        for i in 0..=n {
            for j in 0..=n {
                prop_assert_eq!(mask.mask.allowed(i, j), allowed(i, j));
                count += usize::from(allowed(i, j));
            }
        }
        prop_assert_eq!(mask.mask.allowed_count(), count);
        // Reflexive, so no row is empty.
        for i in 0..=n {
            prop_assert!(mask.mask.allowed(i, i));
        }
        if s >= n {
            prop_assert!(mask.mask.is_dense());
        }
    }

    #[test]
    fn pooling_matches_reference(n in 1usize..30, d in 1usize..4, keep_frac in 0.0f64..1.0, seed in 0u64..1000) {
        let keep = 1 + ((n - 1) as f64 * keep_frac) as usize;
        let z = random_matrix(n, d, seed);
        let blocks = pool_blocks(n, keep).unwrap();
        prop_assert_eq!(blocks.len(), keep);
        prop_assert_eq!(blocks.last().unwrap().end, n);
        for kind in [PoolKind::Max, PoolKind::Average] {
            let mut g = Graph::new();
            let v = g.input(z.clone()).unwrap();
            let out = pool_tokens(&mut g, v, PoolSpec::new(kind, keep), None).unwrap();
            let diff = max_abs_diff(&rows_of(g.value(out)), &reference_pool(&rows_of(&z), keep, kind));
            prop_assert!(diff < 1e-12);
        }
        // Attention averaging with uniform significance is plain averaging.
        let mut g = Graph::new();
        let v = g.input(z.clone()).unwrap();
        let out = pool_tokens(&mut g, v, PoolSpec::new(PoolKind::AttentionAverage, keep), Some(&vec![0.7; n])).unwrap();
        let diff = max_abs_diff(&rows_of(g.value(out)), &reference_pool(&rows_of(&z), keep, PoolKind::Average));
        prop_assert!(diff < 1e-12);
    }
}
