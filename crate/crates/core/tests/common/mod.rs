//! Plain-loop reference implementations used as test oracles. Nothing here
//! goes through the autodiff graph.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sft_core::encoder::{ForwardCtx, LayerParams};
use sft_core::model::{Model, ModalityConfig};
use sft_core::params::{ParamId, ParamStore};
use sft_core::tensor::{Graph, Tensor};
use sft_core::train::mean_loss;

pub type Rows = Vec<Vec<f64>>;

pub fn rows_of(t: &Tensor) -> Rows {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn modalities(shapes: &[(usize, usize)]) -> Vec<ModalityConfig> {
    shapes
        .iter()
        .enumerate()
        .map(|(m, &(tokens, input_dim))| ModalityConfig { name: format!("m{m}"), input_dim, tokens })
        .collect()
}

fn matmul(a: &Rows, w: &Tensor) -> Rows {
    let (k, n) = (w.rows(), w.cols());
    a.iter()
        .map(|row| {
            assert_eq!(row.len(), k);
            (0..n).map(|j| (0..k).map(|p| row[p] * w.at(p, j)).sum()).collect()
        })
        .collect()
}

fn add_bias(a: &mut Rows, b: &Tensor) {
    for row in a.iter_mut() {
        for (x, &bi) in row.iter_mut().zip(b.data()) {
            *x += bi;
        }
    }
}

fn layer_norm(x: &Rows, gain: &Tensor, bias: &Tensor) -> Rows {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            row.iter().enumerate().map(|(j, v)| (v - mean) * inv * gain.data()[j] + bias.data()[j]).collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Softmax of `q kᵀ / √d` restricted to allowed pairs; disallowed weights are 0.
pub fn masked_attention_weights(q: &Rows, k: &Rows, allowed: &dyn Fn(usize, usize) -> bool) -> Rows {
    let d = q[0].len() as f64;
    q.iter()
        .enumerate()
        .map(|(i, qi)| {
            let scores: Vec<Option<f64>> = k
                .iter()
                .enumerate()
                .map(|(j, kj)| allowed(i, j).then(|| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()))
                .collect();
            let max = scores.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let exps: Vec<f64> = scores.iter().map(|s| s.map_or(0.0, |s| (s - max).exp())).collect();
            let z: f64 = exps.iter().sum();
            exps.iter().map(|e| e / z).collect()
        })
        .collect()
}

/// Pre-norm encoder layer in eval mode. Returns the output and every head's weights.
pub fn reference_layer(store: &ParamStore, layer: &LayerParams, x: &Rows, allowed: &dyn Fn(usize, usize) -> bool) -> (Rows, Vec<Rows>) {
    let v = |id: ParamId| store.value(id);
    let n = x.len();
    let d = x[0].len();
    let h = layer_norm(x, v(layer.ln1_gain), v(layer.ln1_bias));
    let mut attn_out = vec![vec![0.0; d]; n];
    let mut weights = Vec::new();
    for head in &layer.heads {
        let mut q = matmul(&h, v(head.wq));
        add_bias(&mut q, v(head.bq));
        let mut k = matmul(&h, v(head.wk));
        add_bias(&mut k, v(head.bk));
        let mut vals = matmul(&h, v(head.wv));
        add_bias(&mut vals, v(head.bv));
        let a = masked_attention_weights(&q, &k, allowed);
        let ctx: Rows = a
            .iter()
            .map(|ai| (0..vals[0].len()).map(|c| ai.iter().zip(&vals).map(|(w, vr)| w * vr[c]).sum()).collect())
            .collect();
        let proj = matmul(&ctx, v(head.wo));
        for (o, p) in attn_out.iter_mut().zip(&proj) {
            for (a, b) in o.iter_mut().zip(p) {
                *a += b;
            }
        }
        weights.push(a);
    }
    add_bias(&mut attn_out, v(layer.bo));
    let y: Rows = x.iter().zip(&attn_out).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect()).collect();
    let h = layer_norm(&y, v(layer.ln2_gain), v(layer.ln2_bias));
    let mut hidden = matmul(&h, v(layer.w1));
    add_bias(&mut hidden, v(layer.b1));
    for row in hidden.iter_mut() {
        for x in row.iter_mut() {
            *x = gelu(*x);
        }
    }
    let mut out = matmul(&hidden, v(layer.w2));
    add_bias(&mut out, v(layer.b2));
    let out = out.iter().zip(&y).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect()).collect();
    (out, weights)
}

/// Strided pattern with the CLS token at index 0, written out independently.
pub fn strided_allowed(stride: usize) -> impl Fn(usize, usize) -> bool {
    move |i, j| {
        if i == 0 || j == 0 {
            return true;
        }
        let diff = i.abs_diff(j);
        diff < stride || diff % stride == 0
    }
}

pub fn max_abs_diff(a: &Rows, b: &Rows) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Mean cross-entropy of `model` on `batch` in eval mode.
pub fn batch_loss(model: &Model, batch: &[&[Tensor]], targets: &[Vec<f64>]) -> f64 {
    let mut g = Graph::new();
    let out = model.forward_batch(&mut g, batch, &mut ForwardCtx::eval(), None).unwrap();
    let loss = mean_loss(&mut g, &out.logits, targets).unwrap();
    g.value(loss).item()
}

/// Largest relative error between backprop and central differences over
/// every scalar parameter. The denominator is floored at `floor` so that
/// parameters with vanishing gradients are compared on absolute error.
pub struct GradReport {
    pub checked: usize,
    pub worst: f64,
    pub worst_param: String,
}

pub fn grad_check(model: &mut Model, batch: &[&[Tensor]], targets: &[Vec<f64>], h: f64, floor: f64) -> GradReport {
    let mut g = Graph::new();
    let out = model.forward_batch(&mut g, batch, &mut ForwardCtx::eval(), None).unwrap();
    let loss = mean_loss(&mut g, &out.logits, targets).unwrap();
    g.backward(loss).unwrap();
    model.params.zero_grad();
    g.accumulate_param_grads(&mut model.params);

    let ids: Vec<ParamId> = model.params.ids().collect();
    let mut report = GradReport { checked: 0, worst: 0.0, worst_param: String::new() };
    for id in ids {
        let n = model.params.value(id).len();
        for e in 0..n {
            let analytic = model.params.grad(id).data()[e];
            let orig = model.params.value(id).data()[e];
            model.params.get_mut(id).value.data_mut()[e] = orig + h;
            let up = batch_loss(model, batch, targets);
            model.params.get_mut(id).value.data_mut()[e] = orig - h;
            let down = batch_loss(model, batch, targets);
            model.params.get_mut(id).value.data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if rel > report.worst {
                report.worst = rel;
                report.worst_param = format!("{}[{e}]", model.params.get(id).name);
            }
        }
    }
    report
}
