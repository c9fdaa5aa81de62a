//! Deterministic inputs shared by the benchmarks.

use candle_core::Device;
use dcl_core::dataset::TrainingSample;
use dcl_core::layout::validate_layout;
use dcl_core::shapes::{generate_shapes_sample, ShapesConfig, ShapesSample};
use dcl_core::trainer::{DclModel, TrainConfig, TrainState};

pub fn shapes(size: usize) -> ShapesConfig {
    ShapesConfig { size, ..ShapesConfig::default() }
}

/// `n` shapes-world samples with validated layouts.
pub fn samples(n: usize, size: usize) -> Vec<(ShapesSample, TrainingSample)> {
    let cfg = shapes(size);
    let cats = cfg.categories().expect("categories");
    (0..n as u64)
        .map(|i| {
            let s = generate_shapes_sample(i, &cfg).expect("sample");
            let layout = validate_layout(&s.layout, &cats, TrainConfig::default().max_instances).expect("layout");
            let t = TrainingSample { image: s.image.clone(), layout };
            (s, t)
        })
        .collect()
}

/// A fresh model with default widths on a `size`-pixel lattice.
pub fn state(size: usize, batch_size: usize) -> TrainState {
    let config = TrainConfig { image_size: size, batch_size, ..TrainConfig::default() };
    let model = DclModel::new(&config, shapes(size).categories().expect("categories"), &Device::Cpu).expect("model");
    TrainState::new(model)
}
