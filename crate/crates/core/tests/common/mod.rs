#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::backprop::GradStore;

use candle_core::{Device, Tensor};
use dcl_core::dataset::TrainingSample;
use dcl_core::discriminator::DiscriminatorConfig;
use dcl_core::inference::InferenceConfig;
use dcl_core::layout::validate_layout;
use dcl_core::mask::MaskGeneratorConfig;
use dcl_core::nn::{scalar, ParamStore};
use dcl_core::shapes::{generate_shapes_sample, ShapesConfig};
use dcl_core::trainer::{DclModel, GeneratorSection, Precision, TrainConfig, TrainState};

pub const TINY_SIZE: usize = 16;

/// A configuration small enough to run hundreds of double-precision steps
/// in seconds.
pub fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        epochs: 1000,
        seed,
        checkpoint_every: 0,
        image_size: TINY_SIZE,
        max_instances: 4,
        precision: Precision::F64,
        feature_channels: 4,
        generator: GeneratorSection { ch: 4, z_dim: 8 },
        mask: MaskGeneratorConfig { embed_dim: 8, style_dim: 8, hidden: 16, patch_size: 4, map_size: 8 },
        inference: InferenceConfig { depth: 2, base_channels: 4 },
        discriminator: DiscriminatorConfig { ch: 4, roi_stage: 1, roi_size: 2 },
        ..TrainConfig::default()
    }
}

/// Default network widths on a small lattice, for properties that depend on
/// realistic capacity rather than on exact arithmetic.
pub fn smoke_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        epochs: 1000,
        seed,
        checkpoint_every: 0,
        image_size: TINY_SIZE,
        ..TrainConfig::default()
    }
}

pub fn smoke_state(seed: u64) -> TrainState {
    let cats = tiny_shapes().categories().unwrap();
    TrainState::new(DclModel::new(&smoke_config(seed), cats, &Device::Cpu).unwrap())
}

pub fn tiny_shapes() -> ShapesConfig {
    ShapesConfig { size: TINY_SIZE, max_objects: 2, ..ShapesConfig::default() }
}

/// Validated in-memory training samples.
pub fn tiny_samples(n: usize, seed: u64) -> Vec<TrainingSample> {
    let cfg = tiny_shapes();
    let cats = cfg.categories().unwrap();
    (0..n as u64)
        .map(|i| {
            let s = generate_shapes_sample(seed * 7919 + i, &cfg).unwrap();
            TrainingSample { image: s.image, layout: validate_layout(&s.layout, &cats, 4).unwrap() }
        })
        .collect()
}

pub fn tiny_state(seed: u64) -> TrainState {
    let cats = tiny_shapes().categories().unwrap();
    TrainState::new(DclModel::new(&tiny_config(seed), cats, &Device::Cpu).unwrap())
}

pub fn batch_refs(samples: &[TrainingSample], step: usize, batch: usize) -> Vec<&TrainingSample> {
    let n = samples.len() / batch;
    let k = step % n;
    samples[k * batch..(k + 1) * batch].iter().collect()
}

/// Every trainable tensor of the four players, keyed by player and name.
pub fn all_params(model: &DclModel) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    let stores: [(&str, &ParamStore); 4] = [
        ("gen", &model.generator.params),
        ("mask", &model.mask.params),
        ("inf", &model.inference.params),
        ("disc", &model.discriminator.params),
    ];
    for (player, store) in stores {
        for (name, t) in store.snapshot().unwrap() {
            let t = t.to_dtype(candle_core::DType::F64).unwrap();
            out.insert(format!("{player}/{name}"), t);
        }
    }
    out
}

pub fn bits(t: &Tensor) -> Vec<u64> {
    t.flatten_all().unwrap().to_dtype(candle_core::DType::F64).unwrap().to_vec1::<f64>().unwrap().into_iter().map(f64::to_bits).collect()
}

/// `(total gradient norm, names without any gradient)` of one player.
pub fn grad_report(store: &ParamStore, grads: &GradStore) -> (f64, Vec<String>) {
    let mut total = 0.0;
    let mut missing = Vec::new();
    for (name, var) in store.iter() {
        match grads.get(var) {
            Some(g) => {
                let n = scalar(&g.sqr().unwrap().sum_all().unwrap()).unwrap();
                if n == 0.0 {
                    missing.push(name.clone());
                }
                total += n;
            }
            None => missing.push(name.clone()),
        }
    }
    (total.sqrt(), missing)
}

/// Modules on the path from a training batch to a loss value.
pub const LOSS_PATH: &[&str] = &[
    "src/objective.rs",
    "src/discriminator.rs",
    "src/generator.rs",
    "src/isla.rs",
    "src/mask.rs",
    "src/batch.rs",
    "src/trainer/step.rs",
    "src/trainer/model.rs",
    "src/trainer/session.rs",
];

pub const FORBIDDEN: &[&str] = &[
    "HardLabelMap",
    "SoftLabelMap::one_hot",
    "cross_entropy",
    "baseline",
    "load_png",
    "dataset::Sample",
    " Sample {",
    "<Sample>",
    "masks/",
];

pub fn scan_sources(files: &[&str]) -> Vec<String> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let mut hits = Vec::new();
    for file in files {
        let text = std::fs::read_to_string(root.join(file)).unwrap();
        for (n, line) in text.lines().enumerate() {
            for pat in FORBIDDEN {
                if line.contains(pat) {
                    hits.push(format!("{file}:{}: {pat}", n + 1));
                }
            }
        }
    }
    hits
}

