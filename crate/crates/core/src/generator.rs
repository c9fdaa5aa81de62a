//! Image generator: a linear stem followed by upsampling residual blocks whose
//! normalization layers are layout-aware, refining the label map per block.

use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::batch::LayoutBatch;
use crate::error::{DclError, Result};
use crate::isla::{assemble_spatial_affine, instance_affine, recalibrate, update_label_map, RunningStats, ToMask};
use crate::nn::{conv2d, linear, resample_label_map, upsample2x, Init, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    #[serde(default = "default_base")]
    pub base_resolution: usize,
    /// Channel multiplier; the stem has `16 * ch` channels.
    pub ch: usize,
    pub n_blocks: usize,
    /// Width of the image style code `z_x`.
    pub z_dim: usize,
}

fn default_base() -> usize {
    4
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { base_resolution: 4, ch: 8, n_blocks: 4, z_dim: 64 }
    }
}

impl GeneratorConfig {
    /// Blocks needed so that `base * 2^n == size`.
    pub fn for_lattice(size: usize, ch: usize, z_dim: usize) -> Result<Self> {
        let base = default_base();
        let mut n = 0;
        let mut r = base;
        while r < size {
            r *= 2;
            n += 1;
        }
        let cfg = Self { base_resolution: base, ch, n_blocks: n, z_dim };
        cfg.check(size)?;
        Ok(cfg)
    }

    pub fn output_resolution(&self) -> usize {
        self.base_resolution << self.n_blocks
    }

    pub fn check(&self, lattice_size: usize) -> Result<()> {
        if self.n_blocks == 0 || self.ch == 0 || self.base_resolution == 0 {
            return Err(DclError::ConfigMismatch("generator needs at least one block".into()));
        }
        if self.output_resolution() != lattice_size {
            return Err(DclError::ConfigMismatch(format!(
                "generator produces {0}x{0}, lattice is {1}x{1}",
                self.output_resolution(),
                lattice_size
            )));
        }
        Ok(())
    }

    /// Channel widths at the stem and after each block.
    pub fn channels(&self) -> Vec<usize> {
        let top = 16 * self.ch;
        (0..=self.n_blocks).map(|k| (top >> k).max(1)).collect()
    }
}

/// Output of one synthesis pass.
#[derive(Debug, Clone)]
pub struct Synthesis {
    /// `(B, 3, L, L)` in `[-1, 1]`.
    pub image: Tensor,
    /// Last refined label map resampled to the image lattice, `(B, d, L, L)`.
    pub label_map: Tensor,
    /// Refined label map at each block's input resolution.
    pub block_maps: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub categories: usize,
    pub style_width: usize,
    pub params: ParamStore,
    stats: BTreeMap<String, RunningStats>,
}

impl Generator {
    pub fn new(config: GeneratorConfig, categories: usize, style_width: usize, init: &mut Init) -> Result<Self> {
        let mut params = ParamStore::new();
        let ch = config.channels();
        let base = config.base_resolution;
        let mut stats = BTreeMap::new();
        params.insert("fc.w", init.xavier(&[ch[0] * base * base, config.z_dim])?)?;
        params.insert("fc.b", init.zeros(&[ch[0] * base * base])?)?;
        for k in 0..config.n_blocks {
            let (ci, co) = (ch[k], ch[k + 1]);
            let p = |s: &str| format!("block{k}.{s}");
            params.insert(p("style"), init.normal(&[style_width, 2 * ci + 2 * co], 0.02)?)?;
            params.insert(p("tomask.w"), init.normal(&[categories, ci + categories, 1, 1], 0.02)?)?;
            params.insert(p("tomask.b"), init.zeros(&[categories])?)?;
            params.insert(p("alpha"), init.zeros(&[1])?)?;
            params.insert(p("conv1.w"), init.xavier(&[co, ci, 3, 3])?)?;
            params.insert(p("conv1.b"), init.zeros(&[co])?)?;
            params.insert(p("conv2.w"), init.xavier(&[co, co, 3, 3])?)?;
            params.insert(p("conv2.b"), init.zeros(&[co])?)?;
            params.insert(p("skip.w"), init.xavier(&[co, ci, 1, 1])?)?;
            params.insert(p("skip.b"), init.zeros(&[co])?)?;
            stats.insert(p("norm1"), RunningStats::new(ci, init.dtype, &init.device)?);
            stats.insert(p("norm2"), RunningStats::new(co, init.dtype, &init.device)?);
        }
        let last = ch[config.n_blocks];
        stats.insert("out.norm".into(), RunningStats::new(last, init.dtype, &init.device)?);
        params.insert("out.w", init.xavier(&[3, last, 3, 3])?)?;
        params.insert("out.b", init.zeros(&[3])?)?;
        Ok(Self { config, categories, style_width, params, stats })
    }

    fn norm(&mut self, name: &str, f: &Tensor, mode: Mode) -> Result<Tensor> {
        let stats = self
            .stats
            .get_mut(name)
            .ok_or_else(|| DclError::Checkpoint(format!("missing running stats {name}")))?;
        match mode {
            Mode::Train => stats.standardize_train(f),
            Mode::Eval => stats.standardize_eval(f),
        }
    }

    /// Synthesizes images from image codes `(B, d_z)`, an initial label map
    /// `(B, d, s, s)` and instance styles `(B, N, K)`.
    pub fn synthesize(
        &mut self,
        z_x: &Tensor,
        initial_map: &Tensor,
        styles: &Tensor,
        batch: &LayoutBatch,
        mode: Mode,
    ) -> Result<Synthesis> {
        let (b, d, mh, mw) = initial_map.dims4()?;
        if d != self.categories || mh != mw || mh == 0 {
            return Err(DclError::ConfigMismatch(format!(
                "label map {:?} incompatible with {} categories",
                initial_map.dims(),
                self.categories
            )));
        }
        if z_x.dims() != [b, self.config.z_dim] || styles.dims3()?.0 != b || styles.dims3()?.2 != self.style_width {
            return Err(DclError::ConfigMismatch(format!(
                "latents {:?} / styles {:?} do not match batch {b}",
                z_x.dims(),
                styles.dims()
            )));
        }
        let ch = self.config.channels();
        let base = self.config.base_resolution;
        let one_hot = batch.one_hot().clone();
        let mut f = linear(z_x, self.params.get("fc.w")?, Some(self.params.get("fc.b")?))?
            .reshape((b, ch[0], base, base))?;
        let mut h = initial_map.clone();
        let mut block_maps = Vec::with_capacity(self.config.n_blocks);
        let mut res = base;
        for k in 0..self.config.n_blocks {
            let (ci, co) = (ch[k], ch[k + 1]);
            let p = |s: &str| format!("block{k}.{s}");
            h = {
                let to_mask = ToMask {
                    weight: self.params.get(&p("tomask.w"))?,
                    bias: self.params.get(&p("tomask.b"))?,
                    alpha: self.params.get(&p("alpha"))?,
                };
                update_label_map(&f, &h, initial_map, &to_mask)?
            };
            block_maps.push(h.clone());

            let projection = self.params.get(&p("style"))?.clone();
            let first = instance_affine(styles, &projection.narrow(1, 0, 2 * ci)?)?;
            let second = instance_affine(styles, &projection.narrow(1, 2 * ci, 2 * co)?)?;

            let mut x = self.norm(&p("norm1"), &f, mode)?;
            let affine = assemble_spatial_affine(&first, &h, &one_hot, &batch.raster(res)?)?;
            x = recalibrate(&x, &affine)?.relu()?;
            x = upsample2x(&x)?;
            x = conv2d(&x, self.params.get(&p("conv1.w"))?, Some(self.params.get(&p("conv1.b"))?))?;

            res *= 2;
            let h_up = resample_label_map(&h, res, res)?;
            x = self.norm(&p("norm2"), &x, mode)?;
            let affine = assemble_spatial_affine(&second, &h_up, &one_hot, &batch.raster(res)?)?;
            x = recalibrate(&x, &affine)?.relu()?;
            x = conv2d(&x, self.params.get(&p("conv2.w"))?, Some(self.params.get(&p("conv2.b"))?))?;

            let shortcut = conv2d(&upsample2x(&f)?, self.params.get(&p("skip.w"))?, Some(self.params.get(&p("skip.b"))?))?;
            f = (x + shortcut)?;
        }
        let x = self.norm("out.norm", &f, mode)?.relu()?;
        let image = conv2d(&x, self.params.get("out.w")?, Some(self.params.get("out.b")?))?.tanh()?;
        let label_map = resample_label_map(&h, res, res)?;
        Ok(Synthesis { image, label_map, block_maps })
    }

    pub fn export_buffers(&self, prefix: &str, out: &mut HashMap<String, Tensor>) -> Result<()> {
        for (k, s) in &self.stats {
            out.insert(format!("{prefix}{k}.mean"), s.mean.copy()?);
            out.insert(format!("{prefix}{k}.var"), s.var.copy()?);
        }
        Ok(())
    }

    pub fn import_buffers(&mut self, prefix: &str, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (k, s) in self.stats.iter_mut() {
            let get = |suffix: &str| {
                let key = format!("{prefix}{k}.{suffix}");
                tensors.get(&key).cloned().ok_or_else(|| DclError::Checkpoint(format!("checkpoint lacks {key}")))
            };
            s.mean = get("mean")?.to_dtype(s.mean.dtype())?;
            s.var = get("var")?.to_dtype(s.var.dtype())?;
        }
        Ok(())
    }

    pub fn dtype(&self) -> DType {
        self.params.get("fc.w").map(|t| t.dtype()).unwrap_or(DType::F32)
    }

    pub fn device(&self) -> Device {
        self.params.get("fc.w").map(|t| t.device().clone()).unwrap_or(Device::Cpu)
    }
}
