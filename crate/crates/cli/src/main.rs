use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use sft_core::checkpoint;
use sft_core::cost::{flops_pipeline, CostReport};
use sft_core::data::{generate_synthetic, load_dataset, save_dataset, Dataset, Split, SyntheticSpec};
use sft_core::model::{Architecture, ModelConfig};
use sft_core::sparse_fusion::PoolKind;
use sft_core::sweep::{mean_std, reduction_sweep, summarize, write_csv, MetricsRow, SweepVariant};
use sft_core::train::{evaluate, train, EvalMetrics, TrainConfig};

#[derive(Parser)]
#[command(name = "sft", version, about = "Sparse fusion transformers for multimodal classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multimodal dataset.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model per seed and write checkpoints and per-epoch metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed list of the configuration.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Score a checkpoint on one split of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train every variant at every reduction factor and seed.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32,64,128,256")]
        factors: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "sft,sft-po,unimodal,concat-pool,lf-pool")]
        variants: Vec<String>,
        /// Number of seeds, counted from 0 (defaults to the configuration's seed list).
        #[arg(long)]
        seeds: Option<u64>,
    },
    /// Analytical flop counts of pipeline variants.
    Cost {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "sft,concat,lf")]
        variants: Vec<String>,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// A training configuration, or a bare model configuration with default training settings.
fn read_config(path: &Path) -> Result<TrainConfig> {
    let value: serde_json::Value = read_json(path)?;
    if value.get("model").is_some() {
        serde_json::from_value(value).with_context(|| format!("parsing {} as a training configuration", path.display()))
    } else {
        let model: ModelConfig = serde_json::from_value(value)
            .with_context(|| format!("parsing {} as a model configuration", path.display()))?;
        let mixup_ok = model.architecture == Architecture::Sft;
        let mut cfg = TrainConfig::new(model);
        cfg.mixup.enabled &= mixup_ok;
        Ok(cfg)
    }
}

fn load_bound(config: &Path, data: &Path) -> Result<(TrainConfig, Dataset)> {
    let mut cfg = read_config(config)?;
    let dataset = load_dataset(data).with_context(|| format!("loading dataset {}", data.display()))?;
    cfg.bind_dataset(&dataset);
    cfg.validate()?;
    Ok((cfg, dataset))
}

fn architecture_name(arch: Architecture) -> &'static str {
    match arch {
        Architecture::Sft => "sft",
        Architecture::SftPoolOnly => "sft-po",
        Architecture::Concat { pool: None } => "concat",
        Architecture::Concat { pool: Some(_) } => "concat-pool",
        Architecture::LateFusion { pool: None } => "lf",
        Architecture::LateFusion { pool: Some(_) } => "lf-pool",
    }
}

fn parse_architecture(name: &str, pool: PoolKind) -> Result<Architecture> {
    Ok(match name {
        "sft" => Architecture::Sft,
        "sft-po" => Architecture::SftPoolOnly,
        "concat" => Architecture::Concat { pool: None },
        "concat-pool" => Architecture::Concat { pool: Some(pool) },
        "lf" => Architecture::LateFusion { pool: None },
        "lf-pool" => Architecture::LateFusion { pool: Some(pool) },
        other => bail!("unknown variant {other:?} (expected sft, sft-po, concat, concat-pool, lf or lf-pool)"),
    })
}

#[derive(Serialize)]
struct TrainSummary {
    variant: String,
    seeds: Vec<u64>,
    best_epochs: Vec<usize>,
    test: Vec<EvalMetrics>,
    top1_mean: f64,
    top1_std: f64,
    map_mean: f64,
    map_std: f64,
    gflops: f64,
}

fn cmd_train(config: &Path, data: &Path, out: &Path, seeds: Option<Vec<u64>>) -> Result<()> {
    let (cfg, dataset) = load_bound(config, data)?;
    let seeds = seeds.unwrap_or_else(|| cfg.seeds.clone());
    if seeds.is_empty() {
        bail!("no seeds to train");
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let variant = architecture_name(cfg.model.architecture).to_string();
    let gflops = flops_pipeline(&cfg.model, cfg.model.architecture)?.gflops();
    let factor = (cfg.model.total_tokens() / cfg.model.keep.iter().sum::<usize>()).max(1);
    let eval_split = if dataset.split(Split::Test).is_empty() { Split::Val } else { Split::Test };

    let mut rows = Vec::new();
    let mut best_epochs = Vec::new();
    let mut test = Vec::new();
    for &seed in &seeds {
        let outcome = train(&cfg, &dataset, seed)?;
        for h in &outcome.history {
            rows.push(MetricsRow {
                variant: variant.clone(),
                factor,
                seed,
                epoch: h.epoch,
                top1: h.val.top1,
                map: h.val.map,
                gflops,
            });
        }
        let path = out.join(format!("model-seed{seed}.sftm"));
        checkpoint::save(&outcome.model, &path)?;
        let metrics = evaluate(&outcome.model, &dataset, dataset.split(eval_split), cfg.batch_size)?;
        println!("seed {seed}: best epoch {}, top1 {:.4}, mAP {:.4}", outcome.best_epoch, metrics.top1, metrics.map);
        best_epochs.push(outcome.best_epoch);
        test.push(metrics);
    }
    let file = fs::File::create(out.join("metrics.csv")).context("creating metrics.csv")?;
    write_csv(&rows, file)?;
    let (top1_mean, top1_std) = mean_std(&test.iter().map(|m| m.top1).collect::<Vec<_>>());
    let (map_mean, map_std) = mean_std(&test.iter().map(|m| m.map).collect::<Vec<_>>());
    let summary = TrainSummary { variant, seeds, best_epochs, test, top1_mean, top1_std, map_mean, map_std, gflops };
    write_json(&out.join("summary.json"), &summary)
}

fn cmd_eval(checkpoint_path: &Path, data: &Path, split: &str) -> Result<()> {
    let split: Split = split.parse()?;
    let model = checkpoint::load(checkpoint_path)?;
    let dataset = load_dataset(data).with_context(|| format!("loading dataset {}", data.display()))?;
    if dataset.manifest.model_modalities() != model.config.modalities {
        bail!("dataset modalities do not match the checkpoint");
    }
    let metrics = evaluate(&model, &dataset, dataset.split(split), 32)?;
    println!("{}", serde_json::to_string(&metrics)?);
    Ok(())
}

fn cmd_sweep(
    config: &Path,
    data: &Path,
    out: &Path,
    factors: &[usize],
    variants: &[String],
    seeds: Option<u64>,
) -> Result<()> {
    let (cfg, dataset) = load_bound(config, data)?;
    if factors.iter().any(|&f| f == 0) {
        bail!("reduction factors must be at least 1");
    }
    let variants = variants.iter().map(|v| v.parse()).collect::<Result<Vec<SweepVariant>, _>>()?;
    let seeds: Vec<u64> = match seeds {
        Some(n) => (0..n).collect(),
        None => cfg.seeds.clone(),
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let rows = reduction_sweep(&cfg, &dataset, factors, &variants, &seeds)?;
    let file = fs::File::create(out.join("sweep.csv")).context("creating sweep.csv")?;
    write_csv(&rows, file)?;
    let summary = summarize(&rows);
    for s in &summary {
        println!("{:<16} x{:<4} top1 {:.4} ± {:.4}  mAP {:.4} ± {:.4}  {:.4} GFlops", s.variant, s.factor, s.top1_mean, s.top1_std, s.map_mean, s.map_std, s.gflops);
    }
    write_json(&out.join("summary.json"), &summary)
}

#[derive(Serialize)]
struct CostRow {
    variant: String,
    flops: u64,
    gflops: f64,
    /// Flops of the first listed variant divided by this one.
    reduction: f64,
    report: CostReport,
}

fn cmd_cost(config: &Path, variants: &[String], json: bool) -> Result<()> {
    let mut model = read_config(config)?.model;
    if model.keep.is_empty() {
        model.keep = model.modalities.iter().map(|m| m.tokens).collect();
    }
    // The classifier head is not part of the count.
    model.num_classes = model.num_classes.max(2);
    let mut rows: Vec<CostRow> = Vec::new();
    for name in variants {
        let report = flops_pipeline(&model, parse_architecture(name, model.pool)?)?;
        let reduction = rows.first().map_or(1.0, |first| report.reduction_vs(&first.report));
        rows.push(CostRow { variant: name.clone(), flops: report.total, gflops: report.gflops(), reduction, report });
    }
    if json {
        println!("{}", serde_json::to_string_pretty(&rows)?);
        return Ok(());
    }
    println!("{:<12} {:>16} {:>10} {:>10}", "variant", "flops", "GFlops", "vs first");
    for r in &rows {
        println!("{:<12} {:>16} {:>10.4} {:>9.2}x", r.variant, r.flops, r.gflops, r.reduction);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { spec, seed, out } => {
            let spec: SyntheticSpec = read_json(&spec)?;
            let dataset = generate_synthetic(&spec, seed)?;
            save_dataset(&dataset, &out)?;
            let s = &dataset.manifest.splits;
            println!("wrote {} samples ({} train, {} val, {} test) to {}", dataset.len(), s.train.len(), s.val.len(), s.test.len(), out.display());
            Ok(())
        }
        Command::Train { config, data, out, seeds } => cmd_train(&config, &data, &out, seeds),
        Command::Eval { checkpoint, data, split } => cmd_eval(&checkpoint, &data, &split),
        Command::Sweep { config, data, out, factors, variants, seeds } => {
            cmd_sweep(&config, &data, &out, &factors, &variants, seeds)
        }
        Command::Cost { config, variants, json } => cmd_cost(&config, &variants, json),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
