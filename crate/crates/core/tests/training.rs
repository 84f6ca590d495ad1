use sft_core::data::{generate_synthetic, SignalEncoding, Split, SyntheticModality, SyntheticSpec};
use sft_core::model::{Architecture, ModelConfig};
use sft_core::sparse_fusion::PoolKind;
use sft_core::train::{evaluate, train, LrSchedule, TrainConfig};

fn separable() -> SyntheticSpec {
    SyntheticSpec {
        modalities: (0..2)
            .map(|m| SyntheticModality {
                name: format!("m{m}"),
                tokens: 8,
                input_dim: 4,
                window: 2,
                redundancy: 2,
                components: vec![m],
                distractors: 0,
            })
            .collect(),
        num_classes: 4,
        num_components: 2,
        samples_per_class: 15,
        noise: 0.1,
        amplitude: 2.0,
        encoding: SignalEncoding::Linear,
        splits: [0.8, 0.2, 0.0],
    }
}

fn config(data: &sft_core::data::Dataset, architecture: Architecture) -> TrainConfig {
    let mut cfg = TrainConfig::new(ModelConfig {
        modalities: data.manifest.model_modalities(),
        dim: 8,
        heads: 2,
        unimodal_layers: 1,
        cross_layers: 1,
        keep: vec![2, 2],
        pool: PoolKind::Max,
        num_classes: 4,
        dropout: 0.0,
        mlp_ratio: 2,
        architecture,
    });
    cfg.lr = 1e-2;
    cfg.batch_size = 8;
    cfg.epochs = 12;
    cfg.schedule = LrSchedule::Step { every: 100, factor: 0.1 };
    cfg.mixup.enabled = false;
    cfg
}

#[test]
fn sft_fits_a_separable_task() {
    let data = generate_synthetic(&separable(), 0).unwrap();
    let cfg = config(&data, Architecture::Sft);
    let out = train(&cfg, &data, 0).unwrap();
    let losses: Vec<f64> = out.history.iter().map(|e| e.train_loss).collect();
    assert!(losses[4] < losses[0], "train loss did not fall: {losses:?}");
    let fit = evaluate(&out.model, &data, data.split(Split::Train), 16).unwrap();
    assert!(fit.top1 >= 0.95, "train top1 {}", fit.top1);
    assert!(out.history[out.best_epoch].val.loss <= out.history.iter().map(|e| e.val.loss).fold(f64::INFINITY, f64::min));
}

#[test]
fn baselines_fit_a_separable_task() {
    let data = generate_synthetic(&separable(), 1).unwrap();
    for arch in [Architecture::Concat { pool: Some(PoolKind::Max) }, Architecture::LateFusion { pool: None }] {
        let out = train(&config(&data, arch), &data, 0).unwrap();
        let fit = evaluate(&out.model, &data, data.split(Split::Train), 16).unwrap();
        assert!(fit.top1 >= 0.95, "{arch:?}: train top1 {}", fit.top1);
    }
}

#[test]
fn mixup_and_label_noise_train_without_error() {
    let data = generate_synthetic(&separable(), 2).unwrap();
    let mut cfg = config(&data, Architecture::Sft);
    cfg.epochs = 4;
    cfg.mixup.enabled = true;
    cfg.mixup.warmup_epochs = 1;
    cfg.label_noise = 0.2;
    cfg.model.dropout = 0.2;
    let out = train(&cfg, &data, 7).unwrap();
    assert_eq!(out.history[0].mixup_batches, 0);
    assert!(out.history[1..].iter().all(|e| e.mixup_batches > 0));
    assert!(out.history.iter().all(|e| e.train_loss.is_finite()));
}

#[test]
fn plateau_schedule_decays_after_patience() {
    let data = generate_synthetic(&separable(), 3).unwrap();
    let mut cfg = config(&data, Architecture::Sft);
    cfg.epochs = 6;
    cfg.lr = 1e-300;
    cfg.schedule = LrSchedule::Plateau { patience: 1, factor: 0.5 };
    let out = train(&cfg, &data, 0).unwrap();
    let lrs: Vec<f64> = out.history.iter().map(|e| e.lr).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    assert!(lrs.last().unwrap() < &1e-300, "{lrs:?}");
}

#[test]
fn mismatched_dataset_is_rejected() {
    let data = generate_synthetic(&separable(), 0).unwrap();
    let mut cfg = config(&data, Architecture::Sft);
    cfg.model.num_classes = 5;
    assert!(train(&cfg, &data, 0).is_err());
}
