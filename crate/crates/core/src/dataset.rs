//! On-disk datasets: a `categories.json` file plus JSON-lines manifests whose
//! records name an RGB image, its boxes and optionally a label image.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DclError, Result};
use crate::layout::{validate_layout, CategorySet, HardLabelMap, Image, LabeledBox, Layout};
use crate::shapes::{generate_shapes_sample, ShapesConfig};

pub const CATEGORIES_FILE: &str = "categories.json";

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub image: String,
    /// `[category, x0, y0, x1, y1]` with normalized coordinates.
    pub boxes: Vec<[f64; 5]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

/// A sample with optional ground truth, for evaluation.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Image,
    pub layout: Layout,
    pub mask: Option<HardLabelMap>,
}

/// What the trainer sees: an image and its validated layout, nothing else.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub image: Image,
    pub layout: Layout,
}

pub fn manifest_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.jsonl"))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| DclError::ManifestParse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Layout of one record, validated against the category set.
pub fn record_layout(
    record: &ManifestRecord,
    index: usize,
    image: &Image,
    categories: &CategorySet,
    max_instances: usize,
) -> Result<Layout> {
    let mut boxes = Vec::with_capacity(record.boxes.len());
    for b in &record.boxes {
        let bbox = [b[1], b[2], b[3], b[4]];
        if bbox.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(DclError::BoxOutOfBounds { sample: index, box_: bbox });
        }
        if b[0] < 0.0 || b[0].fract() != 0.0 {
            return Err(DclError::ManifestParse {
                path: PathBuf::from(&record.image),
                line: index + 1,
                message: format!("category {} is not a non-negative integer", b[0]),
            });
        }
        boxes.push(LabeledBox::new(b[0] as usize, bbox));
    }
    validate_layout(&Layout::new(boxes, image.lattice), categories, max_instances)
}

/// A dataset directory split.
#[derive(Debug, Clone)]
pub struct LayoutDataset {
    pub root: PathBuf,
    pub categories: CategorySet,
    pub records: Vec<ManifestRecord>,
    pub max_instances: usize,
}

impl LayoutDataset {
    pub fn open(root: &Path, split: &str, max_instances: usize) -> Result<Self> {
        let categories = CategorySet::load(&root.join(CATEGORIES_FILE))?;
        let records = read_manifest(&manifest_path(root, split))?;
        Ok(Self { root: root.to_path_buf(), categories, records, max_instances })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Loads sample `index` including its mask, if any.
    pub fn sample(&self, index: usize) -> Result<Sample> {
        let record = &self.records[index];
        let image = Image::load_png(&self.root.join(&record.image))?;
        let layout = record_layout(record, index, &image, &self.categories, self.max_instances)?;
        let mask = match &record.mask {
            Some(m) => {
                let mask = HardLabelMap::load_png(&self.root.join(m))?;
                mask.check_categories(self.categories.len())?;
                if mask.lattice != image.lattice {
                    return Err(DclError::ShapeMismatch(format!("mask {m} does not match its image")));
                }
                Some(mask)
            }
            None => None,
        };
        Ok(Sample { image, layout, mask })
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<Sample>> + '_ {
        (0..self.len()).map(|i| self.sample(i))
    }

    /// Image and layout of sample `index`; the mask file is never opened.
    pub fn training_sample(&self, index: usize) -> Result<TrainingSample> {
        let record = &self.records[index];
        let image = Image::load_png(&self.root.join(&record.image))?;
        let layout = record_layout(record, index, &image, &self.categories, self.max_instances)?;
        Ok(TrainingSample { image, layout })
    }

    pub fn training_samples(&self) -> Result<Vec<TrainingSample>> {
        (0..self.len()).map(|i| self.training_sample(i)).collect()
    }
}

/// Streams validated samples from a manifest file; category names come from
/// `categories.json` next to it.
pub fn load_layout_dataset(path: &Path, max_instances: usize) -> Result<impl Iterator<Item = Result<Sample>>> {
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let categories = CategorySet::load(&root.join(CATEGORIES_FILE))?;
    let records = read_manifest(path)?;
    let ds = LayoutDataset { root, categories, records, max_instances };
    Ok((0..ds.len()).map(move |i| ds.sample(i)))
}

/// Sample order of one epoch, a pure function of `(seed, epoch)`.
pub fn epoch_order(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17));
    order.shuffle(&mut rng);
    order
}

/// Writes a shapes-world dataset: `train.jsonl` with `train` samples and
/// `val.jsonl` with `val` samples, each with masks.
pub fn write_shapes_dataset(dir: &Path, config: &ShapesConfig, train: usize, val: usize, seed: u64) -> Result<()> {
    config.check()?;
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    config.categories()?.save(&dir.join(CATEGORIES_FILE))?;
    let mut index = 0u64;
    for (split, count) in [("train", train), ("val", val)] {
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let s = generate_shapes_sample(seed.wrapping_mul(1_000_003).wrapping_add(index), config)?;
            let image = format!("images/{split}_{index:06}.png");
            let mask = format!("masks/{split}_{index:06}.png");
            s.image.save_png(&dir.join(&image))?;
            s.labels.save_png(&dir.join(&mask))?;
            let boxes = s.layout.boxes.iter().map(|b| {
                let [x0, y0, x1, y1] = b.bbox;
                [b.category as f64, x0, y0, x1, y1]
            });
            records.push(ManifestRecord { image, boxes: boxes.collect(), mask: Some(mask) });
            index += 1;
        }
        write_manifest(&manifest_path(dir, split), &records)?;
    }
    Ok(())
}
