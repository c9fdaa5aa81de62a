//! End-to-end weak-versus-full supervision experiment on shapes world.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::dataset::{write_shapes_dataset, LayoutDataset};
use crate::error::Result;
use crate::eval::{diversity_proxy, evaluate_segmentation, fidelity_proxy, synthesize, SegmentationMetrics};
use crate::nn::Init;
use crate::shapes::ShapesConfig;
use crate::trainer::{latent_seed, load_checkpoint, train, train_supervised, TrainConfig, TrainOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub shapes: ShapesConfig,
    pub train_count: usize,
    pub val_count: usize,
    pub data_seed: u64,
    pub seeds: Vec<u64>,
    /// Validation images used for the synthesis proxies.
    pub proxy_samples: usize,
    pub diversity_samples: usize,
    pub noise_sigma: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            shapes: ShapesConfig::default(),
            train_count: 5000,
            val_count: 500,
            data_seed: 2024,
            seeds: vec![0, 1, 2],
            proxy_samples: 64,
            diversity_samples: 8,
            noise_sigma: 0.5,
        }
    }
}

/// Pass thresholds of the experiment.
pub const MIN_WEAK_MEAN_IOU: f64 = 0.50;
pub const MIN_WEAK_PIXEL_ACC: f64 = 0.80;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub weak: SegmentationMetrics,
    pub supervised: SegmentationMetrics,
    pub fidelity_proxy_syn: f64,
    pub fidelity_proxy_noise: f64,
    pub diversity_proxy: f64,
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub per_seed: Vec<SeedResult>,
    pub weak_mean_iou: f64,
    pub weak_pixel_acc: f64,
    pub supervised_mean_iou: f64,
    pub uniform_baseline_mean_iou: f64,
    pub weak_meets_thresholds: bool,
    pub supervised_beats_weak: bool,
    pub fidelity_directional: bool,
    pub diversity_positive: bool,
}

/// Synthesis proxies of a trained model on the first `n` validation samples.
pub fn synthesis_proxies(
    checkpoint: &Path,
    val: &LayoutDataset,
    n: usize,
    diversity_samples: usize,
    sigma: f64,
    seed: u64,
    device: &Device,
) -> Result<(f64, f64, f64)> {
    let mut model = load_checkpoint(checkpoint, device)?.model;
    let n = n.min(val.len());
    let samples: Vec<_> = (0..n).map(|i| val.training_sample(i)).collect::<Result<_>>()?;
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let real = model.image_batch(&images)?;
    let layouts: Vec<_> = samples.iter().map(|s| s.layout.clone()).collect();
    let seeds: Vec<u64> = (0..n).map(|i| latent_seed(seed, u64::MAX - 2, i)).collect();
    let mut syn = Vec::new();
    for (chunk_l, chunk_s) in layouts.chunks(16).zip(seeds.chunks(16)) {
        syn.push(synthesize(&mut model, chunk_l, chunk_s)?.0);
    }
    let syn = Tensor::cat(&syn, 0)?;
    let noise = Init::new(seed ^ 0x5eed, model.dtype(), device).normal(real.dims(), sigma)?;
    let noisy = (&real + noise)?;
    let fid_syn = fidelity_proxy(&model.features, &real, &syn)?;
    let fid_noise = fidelity_proxy(&model.features, &real, &noisy)?;
    let div = diversity_proxy(&mut model, &layouts[0], diversity_samples, seed)?;
    Ok((fid_syn, fid_noise, div))
}

/// Generates the dataset (unless present), then trains and evaluates the
/// weakly supervised model and the supervised twin for every seed.
pub fn run_experiment(config: &ExperimentConfig, out: &Path, device: &Device) -> Result<ExperimentReport> {
    let data = out.join("data");
    if !data.join("train.jsonl").exists() {
        write_shapes_dataset(&data, &config.shapes, config.train_count, config.val_count, config.data_seed)?;
    }
    let train_set = LayoutDataset::open(&data, "train", config.train.max_instances)?;
    let val = LayoutDataset::open(&data, "val", config.train.max_instances)?;
    let mut per_seed = Vec::new();
    for &seed in &config.seeds {
        let cfg = TrainConfig { seed, ..config.train.clone() };
        let run_dir = out.join(format!("seed_{seed}"));
        let weak_dir = run_dir.join("weak");
        let final_ckpt = weak_dir.join(crate::trainer::FINAL_CHECKPOINT);
        // an interrupted run resumes from its latest checkpoint
        let resume = latest_checkpoint(&weak_dir)?;
        if !final_ckpt.join(crate::trainer::META_FILE).exists() {
            train(&cfg, &data, &weak_dir, &TrainOptions { resume, stop_after: None }, device)?;
        }
        let weak_model = load_checkpoint(&final_ckpt, device)?.model;
        let weak = evaluate_segmentation(&weak_model.inference, &val, 0, cfg.batch_size)?.metrics()?;
        log::info!("seed {seed}: weak mean_iou {:.4} pixel_acc {:.4}", weak.mean_iou, weak.pixel_acc);
        let twin = train_supervised(&cfg, &train_set, device)?;
        let supervised = evaluate_segmentation(&twin, &val, 0, cfg.batch_size)?.metrics()?;
        log::info!("seed {seed}: supervised mean_iou {:.4}", supervised.mean_iou);
        let (fid_syn, fid_noise, div) =
            synthesis_proxies(&final_ckpt, &val, config.proxy_samples, config.diversity_samples, config.noise_sigma, seed, device)?;
        let result = SeedResult {
            seed,
            weak,
            supervised,
            fidelity_proxy_syn: fid_syn,
            fidelity_proxy_noise: fid_noise,
            diversity_proxy: div,
            checkpoint: final_ckpt,
        };
        fs::write(run_dir.join("result.json"), serde_json::to_string_pretty(&result)?)?;
        per_seed.push(result);
    }
    let mean = |f: &dyn Fn(&SeedResult) -> f64| per_seed.iter().map(f).sum::<f64>() / per_seed.len().max(1) as f64;
    let weak_mean_iou = mean(&|r| r.weak.mean_iou);
    let weak_pixel_acc = mean(&|r| r.weak.pixel_acc);
    let supervised_mean_iou = mean(&|r| r.supervised.mean_iou);
    let report = ExperimentReport {
        config: config.clone(),
        weak_mean_iou,
        weak_pixel_acc,
        supervised_mean_iou,
        uniform_baseline_mean_iou: 1.0 / val.categories.len() as f64,
        weak_meets_thresholds: weak_mean_iou >= MIN_WEAK_MEAN_IOU && weak_pixel_acc >= MIN_WEAK_PIXEL_ACC,
        supervised_beats_weak: supervised_mean_iou > weak_mean_iou,
        fidelity_directional: per_seed.iter().all(|r| r.fidelity_proxy_syn < r.fidelity_proxy_noise),
        diversity_positive: per_seed.iter().all(|r| r.diversity_proxy > 0.0),
        per_seed,
    };
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// Newest periodic checkpoint under `run_dir/checkpoints`, if any.
pub fn latest_checkpoint(run_dir: &Path) -> Result<Option<PathBuf>> {
    let dir = run_dir.join("checkpoints");
    if !dir.exists() {
        return Ok(None);
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(crate::trainer::META_FILE).exists())
        .collect();
    entries.sort();
    Ok(entries.pop())
}
