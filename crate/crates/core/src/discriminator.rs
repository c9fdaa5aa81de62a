//! The adversary: a downsampling residual backbone with an image-level head
//! and a class-conditional object head over bilinear RoI features.

use std::collections::{BTreeMap, HashMap};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::batch::LayoutBatch;
use crate::error::{DclError, Result};
use crate::layout::{pixel_span, LabeledBox, Lattice};
use crate::nn::{avg_pool2x, conv2d, linear, sum_spatial, tensor_from, Init, ParamStore, SpectralNorm};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    /// Width of the first block; doubles per block.
    pub ch: usize,
    /// RoI features are read after this many downsampling blocks.
    pub roi_stage: usize,
    pub roi_size: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { ch: 16, roi_stage: 2, roi_size: 8 }
    }
}

/// Scores for one image: realness of the whole image and of each foreground object.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorScores {
    pub p_img: f64,
    pub p_obj: Vec<f64>,
}

/// Batched scores. `p_obj` lists foreground objects of all samples in order;
/// `owners[r]` is the sample of object `r`.
#[derive(Debug, Clone)]
pub struct ScoreBatch {
    pub p_img: Tensor,
    pub p_obj: Tensor,
    pub owners: Vec<usize>,
}

impl ScoreBatch {
    /// Splits into per-sample scores.
    pub fn per_sample(&self) -> Result<Vec<DiscriminatorScores>> {
        let img = crate::nn::to_f64_vec(&self.p_img)?;
        let obj = crate::nn::to_f64_vec(&self.p_obj)?;
        let mut out: Vec<DiscriminatorScores> =
            img.into_iter().map(|p_img| DiscriminatorScores { p_img, p_obj: Vec::new() }).collect();
        for (r, &owner) in self.owners.iter().enumerate() {
            out[owner].p_obj.push(obj[r]);
        }
        Ok(out)
    }

    pub fn detach(&self) -> Self {
        Self { p_img: self.p_img.detach(), p_obj: self.p_obj.detach(), owners: self.owners.clone() }
    }
}

/// Bilinear sample positions of an `out x out` RoI grid on an `h x w` feature
/// lattice: for each grid point, four `(flat index, weight)` corners.
pub fn roi_sample_points(bbox: [f64; 4], lattice: Lattice, out: usize) -> Result<Vec<[(usize, f64); 4]>> {
    let (rows, cols) = pixel_span(bbox, lattice);
    if rows.is_empty() || cols.is_empty() {
        return Err(DclError::EmptyRaster(bbox, lattice.height, lattice.width));
    }
    let [x0, y0, x1, y1] = bbox;
    let (h, w) = (lattice.height, lattice.width);
    let axis = |lo: f64, hi: f64, j: usize, n: usize| -> (usize, usize, f64) {
        let pos = (lo + (j as f64 + 0.5) / out as f64 * (hi - lo)) * n as f64 - 0.5;
        let pos = pos.clamp(0.0, (n - 1) as f64);
        let a = pos.floor() as usize;
        let b = (a + 1).min(n - 1);
        (a, b, pos - a as f64)
    };
    let mut points = Vec::with_capacity(out * out);
    for gy in 0..out {
        let (ya, yb, fy) = axis(y0, y1, gy, h);
        for gx in 0..out {
            let (xa, xb, fx) = axis(x0, x1, gx, w);
            points.push([
                (ya * w + xa, (1.0 - fx) * (1.0 - fy)),
                (ya * w + xb, fx * (1.0 - fy)),
                (yb * w + xa, (1.0 - fx) * fy),
                (yb * w + xb, fx * fy),
            ]);
        }
    }
    Ok(points)
}

/// Sample points that fall back to the single feature cell nearest the box
/// centre when the box covers no cell centre.
fn roi_points_or_nearest(bbox: [f64; 4], lattice: Lattice, out: usize) -> Vec<[(usize, f64); 4]> {
    roi_sample_points(bbox, lattice, out).unwrap_or_else(|_| {
        let (cx, cy) = LabeledBox::new(0, bbox).center();
        let c = ((cx * lattice.width as f64) as usize).min(lattice.width - 1);
        let r = ((cy * lattice.height as f64) as usize).min(lattice.height - 1);
        let cell = r * lattice.width + c;
        vec![[(cell, 1.0), (cell, 0.0), (cell, 0.0), (cell, 0.0)]; out * out]
    })
}

/// Bilinear RoI features `(R, C, out, out)` for `(sample, box)` pairs over a
/// `(B, C, h, w)` feature map.
pub fn roi_extract(features: &Tensor, boxes: &[(usize, [f64; 4])], out: usize) -> Result<Tensor> {
    let (b, c, h, w) = features.dims4()?;
    let lattice = Lattice::new(h, w)?;
    let r = boxes.len();
    let g = out * out;
    let mut idx = Vec::with_capacity(r * g * 4);
    let mut wts = Vec::with_capacity(r * g * 4);
    for &(sample, bbox) in boxes {
        if sample >= b {
            return Err(DclError::ShapeMismatch(format!("RoI sample {sample} outside batch {b}")));
        }
        for corners in roi_points_or_nearest(bbox, lattice, out) {
            for (flat, weight) in corners {
                idx.push((sample * h * w + flat) as u32);
                wts.push(weight);
            }
        }
    }
    let flat = features.permute((0, 2, 3, 1))?.reshape((b * h * w, c))?;
    let idx = Tensor::from_vec(idx, r * g * 4, features.device())?;
    let wts = tensor_from(wts, &[r, g, 4, 1], features.dtype(), features.device())?;
    let picked = flat.index_select(&idx, 0)?.reshape((r, g, 4, c))?;
    let grid = picked.broadcast_mul(&wts)?.sum(2)?;
    Ok(grid.transpose(1, 2)?.reshape((r, c, out, out))?)
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub categories: usize,
    pub blocks: usize,
    pub params: ParamStore,
    norms: BTreeMap<String, SpectralNorm>,
}

/// Spectrally normalized weights of one discriminator snapshot.
#[derive(Debug, Clone)]
pub struct DiscriminatorWeights<'a> {
    owner: &'a Discriminator,
    weights: BTreeMap<String, Tensor>,
}

impl Discriminator {
    /// `lattice_size` must be `4 * 2^k` with `k >= roi_stage`.
    pub fn new(config: DiscriminatorConfig, categories: usize, lattice_size: usize, init: &mut Init) -> Result<Self> {
        let mut blocks = 0;
        let mut r = lattice_size;
        while r > 4 {
            if !r.is_multiple_of(2) {
                return Err(DclError::ConfigMismatch(format!("lattice {lattice_size} is not 4 * 2^k")));
            }
            r /= 2;
            blocks += 1;
        }
        if blocks == 0 || config.roi_stage > blocks || config.roi_stage == 0 || config.roi_size == 0 {
            return Err(DclError::ConfigMismatch(format!(
                "discriminator with {blocks} blocks cannot read RoIs at stage {}",
                config.roi_stage
            )));
        }
        let mut params = ParamStore::new();
        let mut norms = BTreeMap::new();
        let mut add = |name: String, shape: &[usize], bias: Option<usize>, init: &mut Init| -> Result<()> {
            let weight = init.xavier(shape)?;
            norms.insert(name.clone(), SpectralNorm::new(shape, init)?);
            params.insert(format!("{name}.w"), weight)?;
            if let Some(n) = bias {
                params.insert(format!("{name}.b"), init.zeros(&[n])?)?;
            }
            Ok(())
        };
        let width = |k: usize| config.ch << k;
        let mut input = 3;
        for k in 0..blocks {
            let co = width(k);
            add(format!("block{k}.conv1"), &[co, input, 3, 3], Some(co), init)?;
            add(format!("block{k}.conv2"), &[co, co, 3, 3], Some(co), init)?;
            add(format!("block{k}.skip"), &[co, input, 1, 1], Some(co), init)?;
            input = co;
        }
        add("img.fc".into(), &[1, width(blocks - 1)], Some(1), init)?;
        let roi_in = width(config.roi_stage - 1);
        let obj = 2 * roi_in;
        add("obj.conv1".into(), &[obj, roi_in, 3, 3], Some(obj), init)?;
        add("obj.conv2".into(), &[obj, obj, 3, 3], Some(obj), init)?;
        add("obj.fc".into(), &[1, obj], Some(1), init)?;
        add("obj.embed".into(), &[categories, obj], None, init)?;
        Ok(Self { config, categories, blocks, params, norms })
    }

    /// Normalized weights for one phase. `update` runs a power iteration;
    /// `detach` cuts the gradient path into the discriminator parameters.
    pub fn weights(&mut self, update: bool, detach: bool) -> Result<DiscriminatorWeights<'_>> {
        let mut weights = BTreeMap::new();
        for (name, sn) in self.norms.iter_mut() {
            let raw = self.params.get(&format!("{name}.w"))?;
            let raw = if detach { raw.detach() } else { raw.clone() };
            weights.insert(name.clone(), sn.apply(&raw, update)?);
        }
        for (name, var) in self.params.iter().filter(|(n, _)| n.ends_with(".b")) {
            let b = var.as_tensor();
            weights.insert(name.clone(), if detach { b.detach() } else { b.clone() });
        }
        Ok(DiscriminatorWeights { owner: self, weights })
    }

    pub fn export_buffers(&self, prefix: &str, out: &mut HashMap<String, Tensor>) -> Result<()> {
        for (k, sn) in &self.norms {
            out.insert(format!("{prefix}{k}.u"), sn.u.copy()?);
            out.insert(format!("{prefix}{k}.v"), sn.v.copy()?);
        }
        Ok(())
    }

    pub fn import_buffers(&mut self, prefix: &str, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (k, sn) in self.norms.iter_mut() {
            let get = |suffix: &str| {
                let key = format!("{prefix}{k}.{suffix}");
                tensors.get(&key).cloned().ok_or_else(|| DclError::Checkpoint(format!("checkpoint lacks {key}")))
            };
            sn.u = get("u")?.to_dtype(sn.u.dtype())?;
            sn.v = get("v")?.to_dtype(sn.v.dtype())?;
        }
        Ok(())
    }

    pub fn device(&self) -> Device {
        self.params.get("img.fc.w").map(|t| t.device().clone()).unwrap_or(Device::Cpu)
    }
}

impl DiscriminatorWeights<'_> {
    fn w(&self, name: &str) -> Result<&Tensor> {
        self.weights.get(name).ok_or_else(|| DclError::Checkpoint(format!("missing weight {name}")))
    }

    fn b(&self, name: &str) -> Result<&Tensor> {
        self.w(&format!("{name}.b"))
    }

    fn conv(&self, name: &str, x: &Tensor) -> Result<Tensor> {
        conv2d(x, self.w(name)?, Some(self.b(name)?))
    }

    /// Scores images `(B, 3, L, L)` against their layouts.
    pub fn score(&self, images: &Tensor, batch: &LayoutBatch) -> Result<ScoreBatch> {
        let (b, c, h, w) = images.dims4()?;
        let expected = 4 << self.owner.blocks;
        if c != 3 || h != expected || w != expected || b != batch.len() {
            return Err(DclError::ShapeMismatch(format!(
                "discriminator expects ({}, 3, {expected}, {expected}), got {:?}",
                batch.len(),
                images.dims()
            )));
        }
        let mut x = images.clone();
        let mut roi_features = None;
        for k in 0..self.owner.blocks {
            let p = |s: &str| format!("block{k}.{s}");
            let pre = if k == 0 { x.clone() } else { x.relu()? };
            let mut y = self.conv(&p("conv1"), &pre)?.relu()?;
            y = avg_pool2x(&self.conv(&p("conv2"), &y)?)?;
            let shortcut = self.conv(&p("skip"), &avg_pool2x(&x)?)?;
            x = (y + shortcut)?;
            if k + 1 == self.owner.config.roi_stage {
                roi_features = Some(x.clone());
            }
        }
        let pooled = sum_spatial(&x.relu()?)?;
        let p_img = linear(&pooled, self.w("img.fc")?, Some(self.b("img.fc")?))?.squeeze(1)?;

        let instances = batch.foreground_instances();
        let boxes: Vec<(usize, [f64; 4])> =
            instances.iter().map(|&(s, n)| (s, batch.layouts()[s].boxes[n].bbox)).collect();
        let categories: Vec<u32> =
            instances.iter().map(|&(s, n)| batch.layouts()[s].boxes[n].category as u32).collect();
        let features = roi_features.ok_or_else(|| DclError::ConfigMismatch("RoI stage not reached".into()))?;
        let roi = roi_extract(&features, &boxes, self.owner.config.roi_size)?;
        let mut o = self.conv("obj.conv1", &roi.relu()?)?.relu()?;
        o = self.conv("obj.conv2", &o)?.relu()?;
        let phi = sum_spatial(&o)?;
        let base = linear(&phi, self.w("obj.fc")?, Some(self.b("obj.fc")?))?.squeeze(1)?;
        let cat_idx = Tensor::from_vec(categories, instances.len(), images.device())?;
        let embed = self.w("obj.embed")?.index_select(&cat_idx, 0)?;
        let projection = (embed * &phi)?.sum(1)?;
        let p_obj = (base + projection)?;
        Ok(ScoreBatch { p_img, p_obj, owners: instances.iter().map(|&(s, _)| s).collect() })
    }
}
