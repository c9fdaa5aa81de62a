use std::collections::HashMap;
use std::fs;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{DclError, Result};
use crate::layout::CategorySet;

use super::config::TrainConfig;
use super::model::DclModel;
use super::step::TrainState;

pub const PARAMS_FILE: &str = "params.safetensors";
pub const META_FILE: &str = "meta.json";

/// Checkpoint metadata. The random state is implied by `step`: latents and
/// epoch orders are pure functions of `(seed, step)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub step: u64,
    pub seed: u64,
    pub config_hash: String,
    /// The training configuration as TOML, verbatim.
    pub config: String,
    pub categories: Vec<String>,
    pub optimizer_steps: [u64; 4],
}

const OPTIMIZERS: [&str; 4] = ["opt_g/", "opt_h/", "opt_i/", "opt_d/"];

fn tensors(state: &TrainState) -> Result<HashMap<String, Tensor>> {
    let m = &state.model;
    let mut out = HashMap::new();
    m.mask.params.export("mask/", &mut out)?;
    m.generator.params.export("gen/", &mut out)?;
    m.generator.export_buffers("gen_stats/", &mut out)?;
    m.inference.params.export("inf/", &mut out)?;
    m.discriminator.params.export("disc/", &mut out)?;
    m.discriminator.export_buffers("disc_sn/", &mut out)?;
    for (opt, prefix) in [&state.opt_g, &state.opt_h, &state.opt_i, &state.opt_d].into_iter().zip(OPTIMIZERS) {
        opt.export(prefix, &mut out)?;
    }
    Ok(out)
}

/// Writes `params.safetensors` and `meta.json` into `dir`.
pub fn save_checkpoint(state: &TrainState, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let config = &state.model.config;
    let meta = CheckpointMeta {
        step: state.step,
        seed: config.seed,
        config_hash: config.hash()?,
        config: config.to_toml()?,
        categories: state.model.categories.names().to_vec(),
        optimizer_steps: [state.opt_g.steps(), state.opt_h.steps(), state.opt_i.steps(), state.opt_d.steps()],
    };
    candle_core::safetensors::save(&tensors(state)?, dir.join(PARAMS_FILE))?;
    fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(META_FILE);
    if !path.exists() {
        return Err(DclError::Checkpoint(format!("{} not found", path.display())));
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Restores the full training state saved by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path, device: &Device) -> Result<TrainState> {
    let meta = read_meta(dir)?;
    let config = TrainConfig::from_toml(&meta.config)?;
    if config.hash()? != meta.config_hash {
        return Err(DclError::Checkpoint("configuration hash does not match the stored configuration".into()));
    }
    let categories = CategorySet::new(meta.categories.clone())?;
    let model = DclModel::new(&config, categories, device)?;
    let mut state = TrainState::new(model);
    let t = candle_core::safetensors::load(dir.join(PARAMS_FILE), device)?;
    let m = &mut state.model;
    m.mask.params.import("mask/", &t)?;
    m.generator.params.import("gen/", &t)?;
    m.generator.import_buffers("gen_stats/", &t)?;
    m.inference.params.import("inf/", &t)?;
    m.discriminator.params.import("disc/", &t)?;
    m.discriminator.import_buffers("disc_sn/", &t)?;
    let steps = meta.optimizer_steps;
    for ((opt, prefix), s) in [&mut state.opt_g, &mut state.opt_h, &mut state.opt_i, &mut state.opt_d]
        .into_iter()
        .zip(OPTIMIZERS)
        .zip(steps)
    {
        opt.import(prefix, s, &t)?;
    }
    state.step = meta.step;
    Ok(state)
}
