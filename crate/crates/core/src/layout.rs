//! Layouts, label maps and the image lattice they live on.
//!
//! Boxes use normalized coordinates with half-open, pixel-centre containment:
//! pixel `(r, c)` of an `h x w` lattice belongs to box `(x0, y0, x1, y1)` iff
//! `(c + 0.5) / w` lies in `[x0, x1)` and `(r + 0.5) / h` lies in `[y0, y1)`.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{DclError, Result};

/// Foreground instance limit used when no other limit is configured.
pub const DEFAULT_MAX_INSTANCES: usize = 8;

/// The label set. Index 0 is reserved for background.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategorySet {
    names: Vec<String>,
}

impl CategorySet {
    pub const BACKGROUND: usize = 0;

    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.len() < 2 {
            return Err(DclError::InvalidCategories(format!(
                "need background plus at least one class, got {} names",
                names.len()
            )));
        }
        for (i, name) in names.iter().enumerate() {
            if names[..i].contains(name) {
                return Err(DclError::InvalidCategories(format!("duplicate name {name:?}")));
            }
        }
        Ok(Self { names })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Number of categories including background.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn background_id(&self) -> usize {
        Self::BACKGROUND
    }

    pub fn contains(&self, category: usize) -> bool {
        category < self.names.len()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let names: Vec<String> = serde_json::from_str(&text)?;
        Self::new(names)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.names)?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Lattice {
    pub height: usize,
    pub width: usize,
}

impl Lattice {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(DclError::InvalidLattice(height, width));
        }
        Ok(Self { height, width })
    }

    pub fn square(size: usize) -> Result<Self> {
        Self::new(size, size)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// A category-labeled box in normalized `(x0, y0, x1, y1)` coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub category: usize,
    pub bbox: [f64; 4],
}

impl LabeledBox {
    pub fn new(category: usize, bbox: [f64; 4]) -> Self {
        Self { category, bbox }
    }

    pub fn full(category: usize) -> Self {
        Self::new(category, [0.0, 0.0, 1.0, 1.0])
    }

    pub fn is_valid_geometry(&self) -> bool {
        let [x0, y0, x1, y1] = self.bbox;
        self.bbox.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) && x0 < x1 && y0 < y1
    }

    pub fn center(&self) -> (f64, f64) {
        let [x0, y0, x1, y1] = self.bbox;
        ((x0 + x1) / 2.0, (y0 + y1) / 2.0)
    }
}

/// An ordered list of labeled boxes. After [`validate_layout`] the final box is
/// the implicit full-lattice background instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub boxes: Vec<LabeledBox>,
    pub lattice: Lattice,
}

impl Layout {
    pub fn new(boxes: Vec<LabeledBox>, lattice: Lattice) -> Self {
        Self { boxes, lattice }
    }

    fn has_background_slot(&self) -> bool {
        self.boxes
            .last()
            .is_some_and(|b| b.category == CategorySet::BACKGROUND && b.bbox == [0.0, 0.0, 1.0, 1.0])
    }

    /// Foreground boxes (everything except the implicit background instance).
    pub fn foreground(&self) -> &[LabeledBox] {
        if self.has_background_slot() {
            &self.boxes[..self.boxes.len() - 1]
        } else {
            &self.boxes
        }
    }

    /// Number of foreground instances `m`.
    pub fn num_foreground(&self) -> usize {
        self.foreground().len()
    }

    /// All instances including the background slot.
    pub fn instances(&self) -> &[LabeledBox] {
        &self.boxes
    }
}

/// Checks every layout invariant and appends the background instance.
///
/// Idempotent: a validated layout passes through unchanged.
pub fn validate_layout(layout: &Layout, categories: &CategorySet, max_instances: usize) -> Result<Layout> {
    let mut out = layout.clone();
    if !out.has_background_slot() {
        out.boxes.push(LabeledBox::full(categories.background_id()));
    }
    let m = out.num_foreground();
    if m == 0 {
        return Err(DclError::EmptyLayout);
    }
    if m > max_instances {
        return Err(DclError::TooManyInstances { found: m, limit: max_instances });
    }
    for b in &out.boxes {
        if !b.is_valid_geometry() {
            return Err(DclError::InvalidBox(b.bbox));
        }
        if !categories.contains(b.category) {
            return Err(DclError::UnknownCategory { category: b.category, count: categories.len() });
        }
    }
    Ok(out)
}

/// Half-open pixel index ranges `(rows, cols)` whose centres fall in the box.
pub fn pixel_span(bbox: [f64; 4], lattice: Lattice) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let [x0, y0, x1, y1] = bbox;
    // (c + 0.5) / w >= x0  <=>  c >= x0 * w - 0.5
    let span = |lo: f64, hi: f64, n: usize| {
        let n_f = n as f64;
        let start = (lo * n_f - 0.5).ceil().max(0.0) as usize;
        let end = (hi * n_f - 0.5).ceil().clamp(0.0, n_f) as usize;
        start.min(n)..end.max(start.min(n))
    };
    (span(y0, y1, lattice.height), span(x0, x1, lattice.width))
}

/// Binary mask of pixel centres inside the box, row-major.
pub fn rasterize_box(labeled: &LabeledBox, lattice: Lattice) -> Result<Vec<u8>> {
    let (rows, cols) = pixel_span(labeled.bbox, lattice);
    if rows.is_empty() || cols.is_empty() {
        return Err(DclError::EmptyRaster(labeled.bbox, lattice.height, lattice.width));
    }
    let mut mask = vec![0u8; lattice.pixels()];
    for r in rows {
        for c in cols.clone() {
            mask[r * lattice.width + c] = 1;
        }
    }
    Ok(mask)
}

/// Like [`rasterize_box`], but a box that covers no pixel centre falls back to
/// the single cell containing its centre. Used on coarse feature lattices.
pub fn rasterize_box_or_nearest(labeled: &LabeledBox, lattice: Lattice) -> Vec<u8> {
    match rasterize_box(labeled, lattice) {
        Ok(mask) => mask,
        Err(_) => {
            let mut mask = vec![0u8; lattice.pixels()];
            let (cx, cy) = labeled.center();
            let c = ((cx * lattice.width as f64) as usize).min(lattice.width - 1);
            let r = ((cy * lattice.height as f64) as usize).min(lattice.height - 1);
            mask[r * lattice.width + c] = 1;
            mask
        }
    }
}

/// An RGB image in `[-1, 1]`, channel-major `(3, h, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub lattice: Lattice,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(lattice: Lattice, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * lattice.pixels() {
            return Err(DclError::ShapeMismatch(format!(
                "image buffer has {} values, lattice {}x{} needs {}",
                data.len(),
                lattice.height,
                lattice.width,
                3 * lattice.pixels()
            )));
        }
        Ok(Self { lattice, data })
    }

    pub fn filled(lattice: Lattice, rgb: [f32; 3]) -> Self {
        let n = lattice.pixels();
        let mut data = Vec::with_capacity(3 * n);
        for v in rgb {
            data.extend(std::iter::repeat_n(v, n));
        }
        Self { lattice, data }
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.data[channel * self.lattice.pixels() + row * self.lattice.width + col]
    }

    pub fn set(&mut self, channel: usize, row: usize, col: usize, v: f32) {
        let n = self.lattice.pixels();
        self.data[channel * n + row * self.lattice.width + col] = v;
    }

    /// `(3, h, w)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (3, self.lattice.height, self.lattice.width), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Builds an image from a `(3, h, w)` tensor, clamping to `[-1, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(DclError::ShapeMismatch(format!("expected 3 channels, got {c}")));
        }
        let data: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let data = data.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        Self::new(Lattice::new(h, w)?, data)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let Lattice { height, width } = self.lattice;
        image::RgbImage::from_fn(width as u32, height as u32, |c, r| {
            let px = |ch| {
                let v = self.get(ch, r as usize, c as usize).clamp(-1.0, 1.0);
                ((v + 1.0) * 127.5).round() as u8
            };
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let lattice = Lattice { height: img.height() as usize, width: img.width() as usize };
        let n = lattice.pixels();
        let mut data = vec![0f32; 3 * n];
        for (c, r, px) in img.enumerate_pixels() {
            let idx = r as usize * lattice.width + c as usize;
            for ch in 0..3 {
                data[ch * n + idx] = px.0[ch] as f32 / 127.5 - 1.0;
            }
        }
        Self { lattice, data }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(DclError::MissingImageFile(path.to_path_buf()));
        }
        Ok(Self::from_rgb8(&image::open(path)?.to_rgb8()))
    }
}

/// Per-pixel category indices, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardLabelMap {
    pub lattice: Lattice,
    pub labels: Vec<u32>,
}

impl HardLabelMap {
    pub fn new(lattice: Lattice, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != lattice.pixels() {
            return Err(DclError::ShapeMismatch(format!(
                "label buffer has {} entries, lattice needs {}",
                labels.len(),
                lattice.pixels()
            )));
        }
        Ok(Self { lattice, labels })
    }

    pub fn filled(lattice: Lattice, label: u32) -> Self {
        Self { lattice, labels: vec![label; lattice.pixels()] }
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.lattice.width + col]
    }

    pub fn check_categories(&self, count: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l as usize >= count) {
            Some(&l) => Err(DclError::UnknownCategory { category: l as usize, count }),
            None => Ok(()),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(&l) = self.labels.iter().find(|&&l| l > 255) {
            return Err(DclError::ShapeMismatch(format!("label {l} does not fit an 8-bit image")));
        }
        let Lattice { height, width } = self.lattice;
        let img = image::GrayImage::from_fn(width as u32, height as u32, |c, r| {
            image::Luma([self.get(r as usize, c as usize) as u8])
        });
        img.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(DclError::MissingImageFile(path.to_path_buf()));
        }
        let img = image::open(path)?.to_luma8();
        let lattice = Lattice::new(img.height() as usize, img.width() as usize)?;
        Ok(Self { lattice, labels: img.pixels().map(|p| p.0[0] as u32).collect() })
    }
}

/// Per-pixel probability vectors over the category set, shape `(d, h, w)`.
#[derive(Debug, Clone)]
pub struct SoftLabelMap {
    probs: Tensor,
}

impl SoftLabelMap {
    pub const SUM_TOLERANCE: f64 = 1e-5;

    /// Wraps a `(d, h, w)` tensor after checking non-negativity and per-pixel sums.
    pub fn new(probs: Tensor) -> Result<Self> {
        let (d, h, w) = probs.dims3()?;
        let values: Vec<f64> = probs.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let n = h * w;
        for p in 0..n {
            let mut sum = 0.0;
            for c in 0..d {
                let v = values[c * n + p];
                if v.is_nan() || v < 0.0 {
                    return Err(DclError::ShapeMismatch(format!("negative or NaN probability {v} at pixel {p}")));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
                return Err(DclError::ShapeMismatch(format!("probabilities at pixel {p} sum to {sum}")));
            }
        }
        Ok(Self { probs })
    }

    /// One-hot map of a hard labeling.
    pub fn one_hot(labels: &HardLabelMap, categories: usize, device: &Device) -> Result<Self> {
        let n = labels.lattice.pixels();
        let mut data = vec![0f32; categories * n];
        for (p, &l) in labels.labels.iter().enumerate() {
            data[l as usize * n + p] = 1.0;
        }
        let t = Tensor::from_vec(data, (categories, labels.lattice.height, labels.lattice.width), device)?;
        Ok(Self { probs: t })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.probs
    }

    pub fn categories(&self) -> usize {
        self.probs.dims()[0]
    }

    pub fn lattice(&self) -> Lattice {
        let d = self.probs.dims();
        Lattice { height: d[1], width: d[2] }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cats(n: usize) -> CategorySet {
        CategorySet::new((0..n).map(|i| format!("c{i}")).collect()).unwrap()
    }

    #[test]
    fn validate_appends_background() {
        let l = Layout::new(vec![LabeledBox::new(1, [0.1, 0.1, 0.5, 0.5])], Lattice::square(8).unwrap());
        let v = validate_layout(&l, &cats(3), DEFAULT_MAX_INSTANCES).unwrap();
        assert_eq!(v.boxes.len(), 2);
        assert_eq!(v.boxes[1], LabeledBox::full(0));
        assert_eq!(v.num_foreground(), 1);
        let again = validate_layout(&v, &cats(3), DEFAULT_MAX_INSTANCES).unwrap();
        assert_eq!(again, v);
    }

    #[test]
    fn validate_errors() {
        let lat = Lattice::square(8).unwrap();
        let zero_width = Layout::new(vec![LabeledBox::new(1, [0.5, 0.5, 0.5, 0.9])], lat);
        assert!(matches!(validate_layout(&zero_width, &cats(3), 8), Err(DclError::InvalidBox(_))));
        let outside = Layout::new(vec![LabeledBox::new(1, [0.5, 0.5, 1.2, 0.9])], lat);
        assert!(matches!(validate_layout(&outside, &cats(3), 8), Err(DclError::InvalidBox(_))));
        let unknown = Layout::new(vec![LabeledBox::new(3, [0.1, 0.1, 0.5, 0.5])], lat);
        assert!(matches!(
            validate_layout(&unknown, &cats(3), 8),
            Err(DclError::UnknownCategory { category: 3, count: 3 })
        ));
        let many = Layout::new(vec![LabeledBox::new(1, [0.1, 0.1, 0.5, 0.5]); 3], lat);
        assert!(matches!(validate_layout(&many, &cats(3), 2), Err(DclError::TooManyInstances { found: 3, limit: 2 })));
        let empty = Layout::new(vec![], lat);
        assert!(matches!(validate_layout(&empty, &cats(3), 8), Err(DclError::EmptyLayout)));
    }

    #[test]
    fn category_set_rules() {
        assert!(CategorySet::new(vec!["bg".into()]).is_err());
        assert!(CategorySet::new(vec!["bg".into(), "a".into(), "a".into()]).is_err());
        let c = cats(7);
        assert_eq!(c.len(), 7);
        assert_eq!(c.background_id(), 0);
    }

    #[test]
    fn rasterize_examples() {
        let full = rasterize_box(&LabeledBox::full(1), Lattice::square(4).unwrap()).unwrap();
        assert_eq!(full, vec![1; 16]);
        let left = rasterize_box(&LabeledBox::new(1, [0.0, 0.0, 0.5, 1.0]), Lattice::square(2).unwrap()).unwrap();
        assert_eq!(left, vec![1, 0, 1, 0]);
        let tiny = rasterize_box(&LabeledBox::new(1, [0.0, 0.0, 0.1, 0.1]), Lattice::square(4).unwrap());
        assert!(matches!(tiny, Err(DclError::EmptyRaster(..))));
    }

    #[test]
    fn rasterize_matches_enumeration() {
        // Direct pixel-centre enumeration.
        let lat = Lattice::new(5, 7).unwrap();
        for bbox in [[0.1, 0.2, 0.65, 0.9], [0.0, 0.0, 0.3, 0.3], [0.5, 0.5, 1.0, 1.0], [0.2, 0.1, 0.3, 0.25]] {
            let b = LabeledBox::new(1, bbox);
            let mut expected = vec![0u8; lat.pixels()];
            for r in 0..lat.height {
                for c in 0..lat.width {
                    let (u, v) = ((c as f64 + 0.5) / 7.0, (r as f64 + 0.5) / 5.0);
                    if u >= bbox[0] && u < bbox[2] && v >= bbox[1] && v < bbox[3] {
                        expected[r * 7 + c] = 1;
                    }
                }
            }
            match rasterize_box(&b, lat) {
                Ok(mask) => assert_eq!(mask, expected, "{bbox:?}"),
                Err(_) => assert!(expected.iter().all(|&v| v == 0)),
            }
        }
    }

    #[test]
    fn nearest_fallback_sets_one_cell() {
        let m = rasterize_box_or_nearest(&LabeledBox::new(1, [0.0, 0.0, 0.1, 0.1]), Lattice::square(4).unwrap());
        assert_eq!(m.iter().map(|&v| v as usize).sum::<usize>(), 1);
        assert_eq!(m[0], 1);
    }

    #[test]
    fn soft_label_map_checks_sums() {
        let dev = Device::Cpu;
        let ok = Tensor::new(&[[[0.25f32, 1.0]], [[0.75, 0.0]]], &dev).unwrap();
        assert!(SoftLabelMap::new(ok).is_ok());
        let bad = Tensor::new(&[[[0.25f32, 1.0]], [[0.7, 0.0]]], &dev).unwrap();
        assert!(SoftLabelMap::new(bad).is_err());
    }

    #[test]
    fn image_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let lat = Lattice::new(3, 5).unwrap();
        let data = (0..45).map(|i| (i as f32 * 17.0 % 255.0) / 127.5 - 1.0).collect();
        let img = Image::new(lat, data).unwrap();
        let p = dir.path().join("x.png");
        img.save_png(&p).unwrap();
        let back = Image::load_png(&p).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
