//! The mask generator: label embeddings, style latents and the initial soft
//! label map computed from a layout.

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::batch::LayoutBatch;
use crate::error::{DclError, Result};
use crate::layout::{rasterize_box_or_nearest, Lattice, Layout};
use crate::nn::{linear, softmax, tensor_from, Init, ParamStore};

/// Logit assigned to channels that no instance covers at a pixel.
pub const NEGATIVE_FILL: f64 = -10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskGeneratorConfig {
    /// Label embedding width `d_e`.
    pub embed_dim: usize,
    /// Per-instance style code width `d_y`.
    pub style_dim: usize,
    pub hidden: usize,
    /// Side of the per-instance logit patch.
    pub patch_size: usize,
    /// Side of the initial label map lattice.
    pub map_size: usize,
}

impl Default for MaskGeneratorConfig {
    fn default() -> Self {
        Self { embed_dim: 64, style_dim: 64, hidden: 128, patch_size: 16, map_size: 16 }
    }
}

impl MaskGeneratorConfig {
    pub fn instance_width(&self) -> usize {
        self.embed_dim + self.style_dim
    }
}

/// Image style code `z_x` plus one style code per instance (background included).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBundle {
    pub z_x: Vec<f64>,
    pub z_y: Vec<Vec<f64>>,
}

/// Draws i.i.d. standard normal latents for a validated layout.
pub fn sample_latents(layout: &Layout, seed: u64, image_dim: usize, style_dim: usize) -> LatentBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let z_x = draw(image_dim);
    let z_y = (0..layout.boxes.len()).map(|_| draw(style_dim)).collect();
    LatentBundle { z_x, z_y }
}

/// Batched latents: `z_x` is `(B, d_z)`, `z_y` is `(B, N, d_y)` with zero padding rows.
#[derive(Debug, Clone)]
pub struct LatentBatch {
    pub z_x: Tensor,
    pub z_y: Tensor,
}

impl LatentBatch {
    pub fn stack(bundles: &[LatentBundle], slots: usize, dtype: DType, device: &Device) -> Result<Self> {
        let b = bundles.len();
        let dz = bundles.first().map_or(0, |l| l.z_x.len());
        let dy = bundles.iter().flat_map(|l| l.z_y.first()).map(|r| r.len()).next().unwrap_or(0);
        let mut zx = Vec::with_capacity(b * dz);
        let mut zy = vec![0.0; b * slots * dy];
        for (i, l) in bundles.iter().enumerate() {
            if l.z_x.len() != dz || l.z_y.len() > slots {
                return Err(DclError::ShapeMismatch("latent bundles disagree in size".into()));
            }
            zx.extend_from_slice(&l.z_x);
            for (n, row) in l.z_y.iter().enumerate() {
                let base = (i * slots + n) * dy;
                zy[base..base + dy].copy_from_slice(row);
            }
        }
        Ok(Self {
            z_x: tensor_from(zx, &[b, dz], dtype, device)?,
            z_y: tensor_from(zy, &[b, slots, dy], dtype, device)?,
        })
    }
}

/// Precomputed bilinear paste of an `s x s` patch into each box footprint on
/// the `map x map` lattice: four source indices and weights per target pixel.
#[derive(Debug, Clone)]
pub struct PastePlan {
    pub indices: Tensor,
    pub weights: Tensor,
    map_pixels: usize,
}

impl PastePlan {
    pub fn new(batch: &LayoutBatch, patch: usize, map: usize) -> Result<Self> {
        let lattice = Lattice::square(map)?;
        let p = lattice.pixels();
        let (b, n) = (batch.len(), batch.slots());
        let mut idx = vec![0u32; b * n * 4 * p];
        let mut wts = vec![0.0; b * n * 4 * p];
        for (i, l) in batch.layouts().iter().enumerate() {
            for (k, bx) in l.boxes.iter().enumerate() {
                let raster = rasterize_box_or_nearest(bx, lattice);
                let [x0, y0, x1, y1] = bx.bbox;
                let base = (i * n + k) * 4 * p;
                for r in 0..map {
                    for c in 0..map {
                        let pix = r * map + c;
                        if raster[pix] == 0 {
                            continue;
                        }
                        let u = ((c as f64 + 0.5) / map as f64 - x0) / (x1 - x0);
                        let v = ((r as f64 + 0.5) / map as f64 - y0) / (y1 - y0);
                        let px = (u * patch as f64 - 0.5).clamp(0.0, (patch - 1) as f64);
                        let py = (v * patch as f64 - 0.5).clamp(0.0, (patch - 1) as f64);
                        let (cx0, cy0) = (px.floor() as usize, py.floor() as usize);
                        let (cx1, cy1) = ((cx0 + 1).min(patch - 1), (cy0 + 1).min(patch - 1));
                        let (fx, fy) = (px - cx0 as f64, py - cy0 as f64);
                        let corners = [
                            (cy0 * patch + cx0, (1.0 - fx) * (1.0 - fy)),
                            (cy0 * patch + cx1, fx * (1.0 - fy)),
                            (cy1 * patch + cx0, (1.0 - fx) * fy),
                            (cy1 * patch + cx1, fx * fy),
                        ];
                        for (j, (src, w)) in corners.into_iter().enumerate() {
                            idx[base + j * p + pix] = src as u32;
                            wts[base + j * p + pix] = w;
                        }
                    }
                }
            }
        }
        let device = batch.device();
        Ok(Self {
            indices: Tensor::from_vec(idx, (b, n, 4 * p), device)?,
            weights: tensor_from(wts, &[b, n, 4, p], batch.dtype(), device)?,
            map_pixels: p,
        })
    }

    /// Pastes `(B, N, s*s)` patches into `(B, N, map*map)` footprints.
    pub fn apply(&self, patches: &Tensor) -> Result<Tensor> {
        let (b, n, _) = patches.dims3()?;
        let gathered = patches.contiguous()?.gather(&self.indices, 2)?;
        let gathered = gathered.reshape((b, n, 4, self.map_pixels))?;
        Ok((gathered * &self.weights)?.sum(2)?)
    }
}

/// The network `H`: label embedding table plus a per-instance patch decoder.
#[derive(Debug, Clone)]
pub struct MaskGenerator {
    pub config: MaskGeneratorConfig,
    pub categories: usize,
    pub params: ParamStore,
}

impl MaskGenerator {
    pub fn new(config: MaskGeneratorConfig, categories: usize, init: &mut Init) -> Result<Self> {
        let mut params = ParamStore::new();
        let k = config.instance_width();
        let s2 = config.patch_size * config.patch_size;
        params.insert("embedding", init.normal(&[categories, config.embed_dim], 1.0)?)?;
        params.insert("fc1.w", init.kaiming(&[config.hidden, k])?)?;
        params.insert("fc1.b", init.zeros(&[config.hidden])?)?;
        params.insert("fc2.w", init.kaiming(&[s2, config.hidden])?)?;
        params.insert("fc2.b", init.zeros(&[s2])?)?;
        Ok(Self { config, categories, params })
    }

    /// The `d x d_e` table `W^y`.
    pub fn embedding(&self) -> Result<&Tensor> {
        self.params.get("embedding")
    }

    /// Instance style matrix `S = [Y W^y, Z_y]`, shape `(B, N, d_e + d_y)`.
    pub fn style_matrix(&self, batch: &LayoutBatch, latents: &LatentBatch) -> Result<Tensor> {
        let embedded = embed_labels(batch.one_hot(), self.embedding()?)?;
        Ok(Tensor::cat(&[&embedded, &latents.z_y], 2)?)
    }

    /// Per-instance `(B, N, s*s)` logit patches.
    pub fn decode_patches(&self, styles: &Tensor) -> Result<Tensor> {
        let h = linear(styles, self.params.get("fc1.w")?, Some(self.params.get("fc1.b")?))?.relu()?;
        linear(&h, self.params.get("fc2.w")?, Some(self.params.get("fc2.b")?))
    }

    /// Initial soft label map `h^y`, shape `(B, d, map, map)`.
    pub fn initial_map(&self, styles: &Tensor, batch: &LayoutBatch) -> Result<Tensor> {
        let patches = self.decode_patches(styles)?;
        let plan = PastePlan::new(batch, self.config.patch_size, self.config.map_size)?;
        compose_initial_map(&patches, &plan, batch, self.config.map_size)
    }
}

/// `Y · W^y`: row `i` of the result is the table row of instance `i`'s category.
pub fn embed_labels(one_hot: &Tensor, table: &Tensor) -> Result<Tensor> {
    Ok(one_hot.broadcast_matmul(table)?)
}

/// Adds pasted patch logits into their category channels, fills uncovered
/// channels with [`NEGATIVE_FILL`] and applies a channel softmax.
pub fn compose_initial_map(patches: &Tensor, plan: &PastePlan, batch: &LayoutBatch, map: usize) -> Result<Tensor> {
    let pasted = plan.apply(patches)?;
    let assign = batch.one_hot().transpose(1, 2)?.contiguous()?;
    let contrib = assign.matmul(&pasted)?;
    let covered = assign.matmul(&batch.raster(map)?)?.clamp(0.0, 1.0)?;
    let fill = ((covered.ones_like()? - covered)? * NEGATIVE_FILL)?;
    let logits = (contrib + fill)?;
    let (b, d, _) = logits.dims3()?;
    let probs = softmax(&logits, 1)?;
    Ok(probs.reshape((b, d, map, map))?)
}

/// Sum of all entries, used as a scalar probe in gradient tests.
pub fn total(t: &Tensor) -> Result<Tensor> {
    Ok(t.flatten_all()?.sum(D::Minus1)?)
}
