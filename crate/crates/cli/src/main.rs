use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use candle_core::Device;
use clap::{Parser, Subcommand};
use serde::Deserialize;

use dcl_core::dataset::{write_shapes_dataset, LayoutDataset, CATEGORIES_FILE};
use dcl_core::eval::{
    diversity_proxy, emit_samples, evaluate_segmentation, fidelity_proxy, segment_images, synthesize, ConfusionMatrix,
    EvalReport,
};
use dcl_core::experiment::{run_experiment, ExperimentConfig};
use dcl_core::layout::{validate_layout, CategorySet, HardLabelMap, Image, LabeledBox, Layout};
use dcl_core::shapes::ShapesConfig;
use dcl_core::trainer::{latent_seed, load_checkpoint, read_meta, train, TrainConfig, TrainOptions};

#[derive(Parser)]
#[command(name = "dcl", version, about = "Layout-to-image synthesis and weakly supervised segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a shapes-world dataset with train and val splits.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Training samples.
        #[arg(long)]
        count: usize,
        /// Validation samples; defaults to a tenth of `count`.
        #[arg(long)]
        val_count: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 6)]
        classes: usize,
        #[arg(long, default_value_t = 3)]
        max_objects: usize,
    },
    /// Print the default training configuration.
    Config,
    /// Train from a TOML configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many completed steps.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Predict an 8-bit label image for one RGB image.
    Segment {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segmentation metrics and synthesis proxies on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        /// Images used for the synthesis proxies.
        #[arg(long, default_value_t = 64)]
        proxy_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render sample panels for the layouts in a JSON-lines file.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        layouts: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Segmentation metrics between two directories of label images.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Number of categories; read from the ground truth's categories.json when absent.
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Run the weak-versus-full supervision experiment.
    Experiment {
        /// Experiment configuration (TOML); defaults are used when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// One line of a `--layouts` file. Paths are relative to the file.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LayoutRecord {
    boxes: Vec<[f64; 5]>,
    #[serde(default)]
    image: Option<String>,
    #[serde(default)]
    size: Option<usize>,
    /// Present in dataset manifests; sampling never reads it.
    #[serde(default, rename = "mask")]
    _mask: Option<serde::de::IgnoredAny>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let device = Device::Cpu;
    match cli.command {
        Command::GenData { out, count, val_count, seed, size, classes, max_objects } => {
            let cfg = ShapesConfig { size, classes, max_objects, ..Default::default() };
            let val = val_count.unwrap_or(count / 10);
            write_shapes_dataset(&out, &cfg, count, val, seed)?;
            println!("wrote {count} train and {val} val samples to {}", out.display());
        }
        Command::Config => print!("{}", TrainConfig::default().to_toml()?),
        Command::Train { config, data, out, resume, stop_after } => {
            let cfg = TrainConfig::load(&config).with_context(|| format!("reading {}", config.display()))?;
            let summary = train(&cfg, &data, &out, &TrainOptions { resume, stop_after }, &device)?;
            println!("trained {} steps; checkpoint {}", summary.steps, summary.checkpoint.display());
        }
        Command::Segment { checkpoint, image, out } => {
            let state = load_checkpoint(&checkpoint, &device)?;
            let img = Image::load_png(&image)?;
            let pred = segment_images(&state.model.inference, &[&img])?;
            pred[0].save_png(&out)?;
        }
        Command::Eval { checkpoint, data, split, out, proxy_samples, seed } => {
            eval(&checkpoint, &data, &split, &out, proxy_samples, seed, &device)?;
        }
        Command::Sample { checkpoint, layouts, out, seed } => sample(&checkpoint, &layouts, &out, seed, &device)?,
        Command::Metrics { pred, gt, classes } => metrics(&pred, &gt, classes)?,
        Command::Experiment { config, out } => {
            let cfg = match config {
                Some(p) => toml::from_str(&fs::read_to_string(&p)?).with_context(|| format!("parsing {}", p.display()))?,
                None => ExperimentConfig::default(),
            };
            let report = run_experiment(&cfg, &out, &device)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path, split: &str, out: &Path, proxy_samples: usize, seed: u64, device: &Device) -> Result<()> {
    let meta = read_meta(checkpoint)?;
    let mut model = load_checkpoint(checkpoint, device)?.model;
    let ds = LayoutDataset::open(data, split, model.config.max_instances)?;
    if ds.categories != model.categories {
        bail!("dataset categories differ from the checkpoint's");
    }
    let cm = evaluate_segmentation(&model.inference, &ds, 0, model.config.batch_size)?;
    let segmentation = cm.metrics()?;
    let names = model.categories.names().to_vec();
    let class_iou = names.into_iter().zip(cm.class_iou()).collect();

    let n = proxy_samples.clamp(2, ds.len().max(2)).min(ds.len());
    let samples: Vec<_> = (0..n).map(|i| ds.training_sample(i)).collect::<Result<_, _>>()?;
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let real = model.image_batch(&images)?;
    let layouts: Vec<_> = samples.iter().map(|s| s.layout.clone()).collect();
    let seeds: Vec<u64> = (0..n).map(|i| latent_seed(seed, u64::MAX - 2, i)).collect();
    let mut syn = Vec::new();
    for (l, s) in layouts.chunks(16).zip(seeds.chunks(16)) {
        syn.push(synthesize(&mut model, l, s)?.0);
    }
    let syn = candle_core::Tensor::cat(&syn, 0)?;
    let fidelity = fidelity_proxy(&model.features, &real, &syn)?;
    let diversity = diversity_proxy(&mut model, &layouts[0], 8, seed)?;

    let report = EvalReport {
        checkpoint: checkpoint.display().to_string(),
        step: meta.step,
        config_hash: meta.config_hash,
        split: split.to_string(),
        samples: ds.len(),
        segmentation,
        class_iou,
        fidelity_proxy: fidelity,
        diversity_proxy: diversity,
        seed,
    };
    let text = serde_json::to_string_pretty(&report)?;
    fs::write(out, &text)?;
    println!("{text}");
    Ok(())
}

fn sample(checkpoint: &Path, layouts: &Path, out: &Path, seed: u64, device: &Device) -> Result<()> {
    let mut model = load_checkpoint(checkpoint, device)?.model;
    let base = layouts.parent().unwrap_or(Path::new("."));
    let lattice = dcl_core::layout::Lattice::square(model.config.image_size)?;
    let mut parsed = Vec::new();
    let mut reals = Vec::new();
    for (i, line) in fs::read_to_string(layouts)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: LayoutRecord = serde_json::from_str(line).with_context(|| format!("{}:{}", layouts.display(), i + 1))?;
        if rec.size.is_some_and(|s| s != model.config.image_size) {
            bail!("{}:{}: layout size differs from the model's {}", layouts.display(), i + 1, model.config.image_size);
        }
        let boxes = rec.boxes.iter().map(|b| LabeledBox::new(b[0] as usize, [b[1], b[2], b[3], b[4]])).collect();
        parsed.push(validate_layout(&Layout::new(boxes, lattice), &model.categories, model.config.max_instances)?);
        reals.push(match rec.image {
            Some(p) => Some(Image::load_png(&base.join(p))?),
            None => None,
        });
    }
    let written = emit_samples(&mut model, &parsed, &reals, seed, out)?;
    println!("wrote {} sample grids to {}", written.len(), out.display());
    Ok(())
}

fn metrics(pred: &Path, gt: &Path, classes: Option<usize>) -> Result<()> {
    let classes = match classes {
        Some(c) => c,
        None => {
            let candidates = [gt.join(CATEGORIES_FILE), gt.parent().unwrap_or(gt).join(CATEGORIES_FILE)];
            let path = candidates.iter().find(|p| p.exists()).context("no categories.json found; pass --classes")?;
            CategorySet::load(path)?.len()
        }
    };
    let mut names: Vec<PathBuf> = fs::read_dir(gt)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    names.sort();
    let mut cm = ConfusionMatrix::new(classes);
    let mut missing = 0;
    for g in &names {
        let p = pred.join(g.file_name().context("bad file name")?);
        if !p.exists() {
            missing += 1;
            continue;
        }
        cm.accumulate(&HardLabelMap::load_png(g)?, &HardLabelMap::load_png(&p)?)?;
    }
    if missing > 0 {
        bail!("{missing} ground-truth images have no prediction");
    }
    let m = cm.metrics()?;
    let report: BTreeMap<&str, f64> =
        [("class_acc", m.class_acc), ("pixel_acc", m.pixel_acc), ("mean_iou", m.mean_iou), ("fw_iou", m.fw_iou)].into();
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
