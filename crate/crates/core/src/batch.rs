//! Dense tensor encodings of a batch of validated layouts.
//!
//! Instances are padded to a common slot count `N`; padded slots carry an
//! all-zero one-hot row and an empty raster so they never contribute.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};

use crate::error::{DclError, Result};
use crate::layout::{rasterize_box_or_nearest, Lattice, Layout};
use crate::nn::tensor_from;

#[derive(Debug, Clone)]
pub struct LayoutBatch {
    layouts: Vec<Layout>,
    slots: usize,
    categories: usize,
    one_hot: Tensor,
    rasters: BTreeMap<usize, Tensor>,
    dtype: DType,
    device: Device,
}

impl LayoutBatch {
    /// `layouts` must already be validated (background slot appended).
    /// Rasters are prepared for every power-of-two resolution up to `max_resolution`.
    pub fn new(layouts: &[Layout], categories: usize, max_resolution: usize, dtype: DType, device: &Device) -> Result<Self> {
        if layouts.is_empty() {
            return Err(DclError::ShapeMismatch("empty layout batch".into()));
        }
        let slots = layouts.iter().map(|l| l.boxes.len()).max().unwrap_or(0);
        let b = layouts.len();
        let mut one_hot = vec![0.0; b * slots * categories];
        for (i, l) in layouts.iter().enumerate() {
            for (n, bx) in l.boxes.iter().enumerate() {
                if bx.category >= categories {
                    return Err(DclError::UnknownCategory { category: bx.category, count: categories });
                }
                one_hot[(i * slots + n) * categories + bx.category] = 1.0;
            }
        }
        let one_hot = tensor_from(one_hot, &[b, slots, categories], dtype, device)?;
        let mut batch = Self {
            layouts: layouts.to_vec(),
            slots,
            categories,
            one_hot,
            rasters: BTreeMap::new(),
            dtype,
            device: device.clone(),
        };
        let mut res = 1;
        while res <= max_resolution {
            let r = batch.build_raster(res)?;
            batch.rasters.insert(res, r);
            res *= 2;
        }
        if !batch.rasters.contains_key(&max_resolution) {
            let r = batch.build_raster(max_resolution)?;
            batch.rasters.insert(max_resolution, r);
        }
        Ok(batch)
    }

    fn build_raster(&self, res: usize) -> Result<Tensor> {
        let lattice = Lattice::square(res)?;
        let p = lattice.pixels();
        let b = self.layouts.len();
        let mut data = vec![0.0; b * self.slots * p];
        for (i, l) in self.layouts.iter().enumerate() {
            for (n, bx) in l.boxes.iter().enumerate() {
                let mask = rasterize_box_or_nearest(bx, lattice);
                let base = (i * self.slots + n) * p;
                for (k, &v) in mask.iter().enumerate() {
                    data[base + k] = v as f64;
                }
            }
        }
        tensor_from(data, &[b, self.slots, p], self.dtype, &self.device)
    }

    pub fn len(&self) -> usize {
        self.layouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layouts.is_empty()
    }

    pub fn layouts(&self) -> &[Layout] {
        &self.layouts
    }

    /// Slot count `N` (largest `m + 1` in the batch).
    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn categories(&self) -> usize {
        self.categories
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// `(B, N, d)` one-hot category rows.
    pub fn one_hot(&self) -> &Tensor {
        &self.one_hot
    }

    /// `(B, N, res*res)` binary box footprints at a square resolution.
    pub fn raster(&self, res: usize) -> Result<Tensor> {
        match self.rasters.get(&res) {
            Some(t) => Ok(t.clone()),
            None => self.build_raster(res),
        }
    }

    /// `(sample, instance)` pairs of all foreground instances, in layout order.
    pub fn foreground_instances(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, l) in self.layouts.iter().enumerate() {
            for n in 0..l.num_foreground() {
                out.push((i, n));
            }
        }
        out
    }
}
