//! Segmentation metrics, synthesis-quality proxies and sample panels.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::Tensor;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dataset::{LayoutDataset, Sample};
use crate::error::{DclError, Result};
use crate::generator::Mode;
use crate::inference::{argmax_channels, InferenceNet};
use crate::layout::{HardLabelMap, Image, Layout};
use crate::nn::{scalar, to_f64_vec};
use crate::objective::{mean_kl, perceptual_l1, FixedFeatureExtractor};
use crate::trainer::{latent_seed, DclModel};

/// `counts[g][p]`: pixels with ground truth `g` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentationMetrics {
    pub class_acc: f64,
    pub pixel_acc: f64,
    pub mean_iou: f64,
    pub fw_iou: f64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![vec![0; classes]; classes] }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accumulate(&mut self, gt: &HardLabelMap, pred: &HardLabelMap) -> Result<()> {
        if gt.lattice != pred.lattice {
            return Err(DclError::ShapeMismatch(format!("ground truth {:?} vs prediction {:?}", gt.lattice, pred.lattice)));
        }
        gt.check_categories(self.classes)?;
        pred.check_categories(self.classes)?;
        for (&g, &p) in gt.labels.iter().zip(&pred.labels) {
            self.counts[g as usize][p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(DclError::ShapeMismatch("confusion matrices differ in size".into()));
        }
        for (a, b) in self.counts.iter_mut().flatten().zip(other.counts.iter().flatten()) {
            *a += b;
        }
        Ok(())
    }

    fn row(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    fn col(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    /// Per-class IoU; `None` for classes absent from both ground truth and prediction.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.counts[c][c];
                let union = self.row(c) + self.col(c) - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn metrics(&self) -> Result<SegmentationMetrics> {
        let total = self.total();
        if total == 0 {
            return Err(DclError::EmptyMatrix);
        }
        let trace: u64 = (0..self.classes).map(|c| self.counts[c][c]).sum();
        let recalls: Vec<f64> = (0..self.classes)
            .filter(|&c| self.row(c) > 0)
            .map(|c| self.counts[c][c] as f64 / self.row(c) as f64)
            .collect();
        let ious = self.class_iou();
        let present: Vec<f64> = ious.iter().flatten().copied().collect();
        let fw_iou = (0..self.classes)
            .filter_map(|c| ious[c].map(|iou| self.row(c) as f64 / total as f64 * iou))
            .sum();
        Ok(SegmentationMetrics {
            class_acc: recalls.iter().sum::<f64>() / recalls.len() as f64,
            pixel_acc: trace as f64 / total as f64,
            mean_iou: present.iter().sum::<f64>() / present.len() as f64,
            fw_iou,
        })
    }
}

/// Hard predictions of an inference network for a list of images.
pub fn segment_images(net: &InferenceNet, images: &[&Image]) -> Result<Vec<HardLabelMap>> {
    let (dtype, device) = net.dtype_device()?;
    let ts: Vec<Tensor> = images.iter().map(|i| i.to_tensor(dtype, &device)).collect::<Result<_>>()?;
    let probs = net.infer(&Tensor::stack(&ts, 0)?)?.detach();
    let mut out = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let labels = argmax_channels(&probs.get(i)?, img.lattice)?;
        out.push(HardLabelMap::new(img.lattice, labels)?);
    }
    Ok(out)
}

/// Confusion matrix of an inference network over the first `limit` masked
/// samples of a split (all when `limit == 0`).
pub fn evaluate_segmentation(net: &InferenceNet, dataset: &LayoutDataset, limit: usize, chunk: usize) -> Result<ConfusionMatrix> {
    let n = if limit == 0 { dataset.len() } else { limit.min(dataset.len()) };
    let mut cm = ConfusionMatrix::new(dataset.categories.len());
    let mut start = 0;
    while start < n {
        let end = (start + chunk.max(1)).min(n);
        let samples: Vec<Sample> = (start..end).map(|i| dataset.sample(i)).collect::<Result<_>>()?;
        let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
        let preds = segment_images(net, &images)?;
        for (s, p) in samples.iter().zip(&preds) {
            if let Some(gt) = &s.mask {
                cm.accumulate(gt, p)?;
            }
        }
        start = end;
    }
    Ok(cm)
}

/// Synthesized images `(B, 3, L, L)` and refined label maps for layouts
/// under explicit latent seeds, in evaluation mode.
pub fn synthesize(model: &mut DclModel, layouts: &[Layout], seeds: &[u64]) -> Result<(Tensor, Tensor)> {
    let batch = model.layout_batch(layouts)?;
    let bundles = model.latents(layouts, seeds);
    let latents = model.stack_latents(&bundles, &batch)?;
    let styles = model.styles(&batch, &latents)?;
    let out = model.latent_consensus_pass(&batch, &latents, &styles, Mode::Eval)?;
    Ok((out.x_syn.detach(), out.h_y.detach()))
}

/// Mean pairwise perceptual distance between `n` syntheses of one layout.
pub fn diversity_proxy(model: &mut DclModel, layout: &Layout, n: usize, seed: u64) -> Result<f64> {
    let seeds: Vec<u64> = (0..n).map(|i| latent_seed(seed, u64::MAX, i)).collect();
    diversity_proxy_with_seeds(model, layout, &seeds)
}

pub fn diversity_proxy_with_seeds(model: &mut DclModel, layout: &Layout, seeds: &[u64]) -> Result<f64> {
    if seeds.len() < 2 {
        return Err(DclError::Config("diversity needs at least two samples".into()));
    }
    let layouts = vec![layout.clone(); seeds.len()];
    let (images, _) = synthesize(model, &layouts, seeds)?;
    pairwise_perceptual(&model.features, &images)
}

/// Mean of `perceptual_l1` over unordered pairs of a `(n, 3, h, w)` stack.
pub fn pairwise_perceptual(features: &FixedFeatureExtractor, images: &Tensor) -> Result<f64> {
    let n = images.dims4()?.0;
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..n {
        for j in i + 1..n {
            let a = images.get(i)?.unsqueeze(0)?;
            let b = images.get(j)?.unsqueeze(0)?;
            total += crate::nn::scalar(&perceptual_l1(features, &a, &b)?)?;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Spatially averaged features of every scale, concatenated: `(n, 3C)`.
pub fn pooled_features(features: &FixedFeatureExtractor, images: &Tensor) -> Result<DMatrix<f64>> {
    let n = images.dims4()?.0;
    let pooled: Vec<Tensor> = features
        .features(images)?
        .iter()
        .map(|f| Ok(f.mean(3)?.mean(2)?))
        .collect::<Result<_>>()?;
    let cat = Tensor::cat(&pooled, 1)?;
    let d = cat.dims2()?.1;
    Ok(DMatrix::from_row_slice(n, d, &to_f64_vec(&cat)?))
}

fn moments(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mean = x.row_mean().transpose();
    let centered = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / n.max(1.0);
    (mean, cov)
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Frechet distance between Gaussian fits of two feature sets.
pub fn frechet_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let (ma, ca) = moments(a);
    let (mb, cb) = moments(b);
    let root_a = sqrt_psd(&ca);
    let cross = sqrt_psd(&(&root_a * &cb * &root_a));
    let value = (ma - mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * cross.trace();
    value.max(0.0)
}

/// Frechet distance of pooled fixed-extractor features of two image stacks.
pub fn fidelity_proxy(features: &FixedFeatureExtractor, real: &Tensor, syn: &Tensor) -> Result<f64> {
    if real.dims4()?.0 == 0 || syn.dims4()?.0 == 0 {
        return Err(DclError::Config("fidelity needs non-empty image sets".into()));
    }
    Ok(frechet_distance(&pooled_features(features, real)?, &pooled_features(features, syn)?))
}

/// Evaluation summary written by `dcl eval`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub step: u64,
    pub config_hash: String,
    pub split: String,
    pub samples: usize,
    pub segmentation: SegmentationMetrics,
    pub class_iou: BTreeMap<String, Option<f64>>,
    pub fidelity_proxy: f64,
    pub diversity_proxy: f64,
    pub seed: u64,
}

/// Per-grid measurements written next to the grids as `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub file: String,
    /// KL between the refined map and the map inferred from the synthesis.
    pub latent_kl: f64,
    /// L1 between a supplied real image and its reconstruction.
    pub recon_l1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub seed: u64,
    pub mean_latent_kl: f64,
    pub mean_recon_l1: Option<f64>,
    pub samples: Vec<SampleRecord>,
}

pub const SAMPLE_SUMMARY_FILE: &str = "summary.json";

/// Colour of category `c` in label-map panels.
pub fn palette(c: usize) -> [u8; 3] {
    const P: [[u8; 3]; 10] = [
        [20, 20, 20],
        [230, 60, 60],
        [60, 200, 80],
        [70, 90, 230],
        [230, 210, 60],
        [210, 80, 210],
        [70, 210, 220],
        [240, 140, 40],
        [150, 150, 150],
        [120, 70, 30],
    ];
    P[c % P.len()]
}

fn label_panel(labels: &HardLabelMap) -> image::RgbImage {
    let l = labels.lattice;
    image::RgbImage::from_fn(l.width as u32, l.height as u32, |x, y| image::Rgb(palette(labels.get(y as usize, x as usize) as usize)))
}

fn layout_panel(layout: &Layout) -> image::RgbImage {
    let l = layout.lattice;
    let mut img = image::RgbImage::from_pixel(l.width as u32, l.height as u32, image::Rgb(palette(0)));
    for b in layout.foreground() {
        let (rows, cols) = crate::layout::pixel_span(b.bbox, l);
        let color = image::Rgb(palette(b.category));
        for r in rows.clone() {
            for c in cols.clone() {
                if r == rows.start || r + 1 == rows.end || c == cols.start || c + 1 == cols.end {
                    img.put_pixel(c as u32, r as u32, color);
                }
            }
        }
    }
    img
}

fn hard_from_probs(probs: &Tensor, layout: &Layout) -> Result<HardLabelMap> {
    HardLabelMap::new(layout.lattice, argmax_channels(probs, layout.lattice)?)
}

/// One row of panels per layout: boxes, refined label map, synthesis and,
/// when a real image is given, its inferred map and reconstruction. Also
/// writes a [`SampleSummary`].
pub fn emit_samples(
    model: &mut DclModel,
    layouts: &[Layout],
    reals: &[Option<Image>],
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let mut records = Vec::new();
    for (i, layout) in layouts.iter().enumerate() {
        let s = latent_seed(seed, u64::MAX - 1, i);
        let (x_syn, h_y) = synthesize(model, std::slice::from_ref(layout), &[s])?;
        let latent_kl = scalar(&mean_kl(&h_y, &model.inference.infer(&x_syn)?)?)?;
        let mut panels = vec![
            layout_panel(layout),
            label_panel(&hard_from_probs(&h_y.get(0)?, layout)?),
            Image::from_tensor(&x_syn.get(0)?)?.to_rgb8(),
        ];
        let mut recon_l1 = None;
        if let Some(real) = reals.get(i).and_then(|r| r.as_ref()) {
            let batch = model.layout_batch(std::slice::from_ref(layout))?;
            let latents = model.stack_latents(&model.latents(std::slice::from_ref(layout), &[s]), &batch)?;
            let styles = model.styles(&batch, &latents)?;
            let x_real = model.image_batch(&[real])?;
            let data = model.data_consensus_pass(&x_real, &batch, &latents, &styles, Mode::Eval, false)?;
            recon_l1 = Some(scalar(&crate::objective::recon_l1(&x_real, &data.x_recon)?)?);
            panels.push(real.to_rgb8());
            panels.push(label_panel(&hard_from_probs(&data.h_real_hat.get(0)?, layout)?));
            panels.push(Image::from_tensor(&data.x_recon.get(0)?)?.to_rgb8());
        }
        let (w, h) = (layout.lattice.width as u32, layout.lattice.height as u32);
        let gap = 2;
        let mut grid = image::RgbImage::from_pixel(panels.len() as u32 * (w + gap) - gap, h, image::Rgb([255, 255, 255]));
        for (k, p) in panels.iter().enumerate() {
            image::imageops::replace(&mut grid, p, (k as u32 * (w + gap)) as i64, 0);
        }
        let file = format!("sample_{i:04}.png");
        let path = out_dir.join(&file);
        grid.save(&path)?;
        written.push(path);
        records.push(SampleRecord { file, latent_kl, recon_l1 });
    }
    let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let summary = SampleSummary {
        seed,
        mean_latent_kl: mean(records.iter().map(|r| r.latent_kl).collect()).unwrap_or(0.0),
        mean_recon_l1: mean(records.iter().filter_map(|r| r.recon_l1).collect()),
        samples: records,
    };
    std::fs::write(out_dir.join(SAMPLE_SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
    Ok(written)
}
