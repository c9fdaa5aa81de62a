//! Procedural "shapes world": flat-coloured primitives on a plain background,
//! with exact boxes and per-pixel ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DclError, Result};
use crate::layout::{CategorySet, HardLabelMap, Image, LabeledBox, Lattice, Layout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    Triangle,
    Diamond,
    Cross,
    Ring,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 6] = [
        ShapeKind::Rectangle,
        ShapeKind::Ellipse,
        ShapeKind::Triangle,
        ShapeKind::Diamond,
        ShapeKind::Cross,
        ShapeKind::Ring,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Ellipse => "ellipse",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Diamond => "diamond",
            ShapeKind::Cross => "cross",
            ShapeKind::Ring => "ring",
        }
    }

    /// Base colour in `[-1, 1]`.
    pub fn color(self) -> [f32; 3] {
        match self {
            ShapeKind::Rectangle => [0.9, -0.7, -0.7],
            ShapeKind::Ellipse => [-0.7, 0.8, -0.6],
            ShapeKind::Triangle => [-0.6, -0.5, 0.9],
            ShapeKind::Diamond => [0.9, 0.8, -0.7],
            ShapeKind::Cross => [0.8, -0.6, 0.8],
            ShapeKind::Ring => [-0.6, 0.8, 0.9],
        }
    }

    /// Membership of a point in local box coordinates `u, v` in `[0, 1]`.
    pub fn contains(self, u: f64, v: f64) -> bool {
        let (x, y) = (2.0 * u - 1.0, 2.0 * v - 1.0);
        match self {
            ShapeKind::Rectangle => true,
            ShapeKind::Ellipse => x * x + y * y <= 1.0,
            // apex at the top centre, base along the bottom edge
            ShapeKind::Triangle => x.abs() <= v,
            ShapeKind::Diamond => x.abs() + y.abs() <= 1.0,
            ShapeKind::Cross => x.abs() <= 0.34 || y.abs() <= 0.34,
            ShapeKind::Ring => {
                let r = x * x + y * y;
                (0.3..=1.0).contains(&r)
            }
        }
    }
}

/// Pixel rectangle `[r0, r1) x [c0, c1)` on a lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub r0: usize,
    pub c0: usize,
    pub r1: usize,
    pub c1: usize,
}

/// Row-major mask of the primitive drawn into `rect`, sampled at pixel centres.
pub fn rasterize_shape(kind: ShapeKind, rect: PixelRect, lattice: Lattice) -> Vec<bool> {
    let mut mask = vec![false; lattice.pixels()];
    let (h, w) = ((rect.r1 - rect.r0) as f64, (rect.c1 - rect.c0) as f64);
    for r in rect.r0..rect.r1 {
        for c in rect.c0..rect.c1 {
            let u = (c - rect.c0) as f64 / (w - 1.0).max(1.0);
            let v = (r - rect.r0) as f64 / (h - 1.0).max(1.0);
            if kind.contains(u, v) {
                mask[r * lattice.width + c] = true;
            }
        }
    }
    mask
}

/// Normalized box of the tight pixel extent of a mask; `None` for empty masks.
pub fn tight_box(mask: &[bool], lattice: Lattice) -> Option<[f64; 4]> {
    let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (r, c) = (i / lattice.width, i % lattice.width);
        r0 = r0.min(r);
        c0 = c0.min(c);
        r1 = r1.max(r + 1);
        c1 = c1.max(c + 1);
    }
    (r0 != usize::MAX).then(|| {
        let (h, w) = (lattice.height as f64, lattice.width as f64);
        [c0 as f64 / w, r0 as f64 / h, c1 as f64 / w, r1 as f64 / h]
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapesConfig {
    pub size: usize,
    /// Number of shape classes, at most six.
    pub classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Shape side length as a fraction of the lattice.
    pub min_extent: f64,
    pub max_extent: f64,
    pub color_jitter: f32,
    /// Largest background channel level; backgrounds are dark and muted.
    pub background_level: f32,
    /// Minimum visible fraction of every shape after occlusion.
    pub min_visible: f64,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        Self {
            size: 64,
            classes: 6,
            min_objects: 1,
            max_objects: 3,
            min_extent: 0.25,
            max_extent: 0.55,
            color_jitter: 0.15,
            background_level: -0.3,
            min_visible: 0.3,
        }
    }
}

impl ShapesConfig {
    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(DclError::Config(m.to_string()));
        if self.classes == 0 || self.classes > ShapeKind::ALL.len() {
            return bad("shapes world supports 1 to 6 classes");
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("object count range must satisfy 1 <= min <= max");
        }
        if !(0.0 < self.min_extent && self.min_extent <= self.max_extent && self.max_extent <= 1.0) {
            return bad("extent range must satisfy 0 < min <= max <= 1");
        }
        if self.size < 4 {
            return bad("lattice too small");
        }
        Ok(())
    }

    /// Background followed by one category per shape class.
    pub fn categories(&self) -> Result<CategorySet> {
        let mut names = vec!["background".to_string()];
        names.extend(ShapeKind::ALL[..self.classes].iter().map(|k| k.name().to_string()));
        CategorySet::new(names)
    }
}

/// One generated scene.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapesSample {
    pub image: Image,
    pub layout: Layout,
    pub labels: HardLabelMap,
    /// Primitive and drawing rectangle of each foreground box.
    pub primitives: Vec<(ShapeKind, PixelRect)>,
}

/// Deterministic scene for `seed`; resamples internally until every shape
/// keeps enough visible pixels.
pub fn generate_shapes_sample(seed: u64, config: &ShapesConfig) -> Result<ShapesSample> {
    config.check()?;
    let lattice = Lattice::square(config.size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        if let Some(sample) = try_sample(&mut rng, config, lattice) {
            return Ok(sample);
        }
    }
}

fn try_sample(rng: &mut ChaCha8Rng, config: &ShapesConfig, lattice: Lattice) -> Option<ShapesSample> {
    let n = config.size;
    let m = rng.random_range(config.min_objects..=config.max_objects);
    let bg: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.9..config.background_level));
    let mut image = Image::filled(lattice, bg);
    let mut labels = vec![0u32; lattice.pixels()];
    let mut owner = vec![usize::MAX; lattice.pixels()];
    let mut shapes = Vec::with_capacity(m);
    let lo = ((config.min_extent * n as f64).round() as usize).max(2);
    let hi = ((config.max_extent * n as f64).round() as usize).clamp(lo, n);
    for i in 0..m {
        let class = rng.random_range(0..config.classes);
        let kind = ShapeKind::ALL[class];
        let (sh, sw) = (rng.random_range(lo..=hi), rng.random_range(lo..=hi));
        let (r0, c0) = (rng.random_range(0..=n - sh), rng.random_range(0..=n - sw));
        let rect = PixelRect { r0, c0, r1: r0 + sh, c1: c0 + sw };
        let mask = rasterize_shape(kind, rect, lattice);
        let bbox = tight_box(&mask, lattice)?;
        let base = kind.color();
        let color: [f32; 3] = std::array::from_fn(|ch| {
            (base[ch] + rng.random_range(-config.color_jitter..=config.color_jitter)).clamp(-1.0, 1.0)
        });
        let area = mask.iter().filter(|&&v| v).count();
        for (p, _) in mask.iter().enumerate().filter(|(_, &v)| v) {
            labels[p] = class as u32 + 1;
            owner[p] = i;
            let (r, c) = (p / n, p % n);
            for (ch, &v) in color.iter().enumerate() {
                image.set(ch, r, c, v);
            }
        }
        shapes.push((LabeledBox::new(class + 1, bbox), area, (kind, rect)));
    }
    for (i, &(_, area, _)) in shapes.iter().enumerate() {
        let visible = owner.iter().filter(|&&o| o == i).count();
        if (visible as f64) < config.min_visible * area as f64 {
            return None;
        }
    }
    let primitives = shapes.iter().map(|s| s.2).collect();
    let layout = Layout::new(shapes.into_iter().map(|(b, _, _)| b).collect(), lattice);
    Some(ShapesSample { image, layout, labels: HardLabelMap::new(lattice, labels).ok()?, primitives })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::rasterize_box;

    #[test]
    fn same_seed_same_scene() {
        let cfg = ShapesConfig::default();
        assert_eq!(generate_shapes_sample(17, &cfg).unwrap(), generate_shapes_sample(17, &cfg).unwrap());
        assert_ne!(generate_shapes_sample(17, &cfg).unwrap(), generate_shapes_sample(18, &cfg).unwrap());
    }

    #[test]
    fn single_object_scene_has_two_labels_matching_its_raster() {
        let cfg = ShapesConfig { min_objects: 1, max_objects: 1, ..Default::default() };
        for seed in 0..30 {
            let s = generate_shapes_sample(seed, &cfg).unwrap();
            let b = s.layout.boxes[0];
            assert!(s.labels.labels.iter().all(|&l| l == 0 || l as usize == b.category));
            let count = s.labels.labels.iter().filter(|&&l| l as usize == b.category).count();
            let (kind, rect) = s.primitives[0];
            assert_eq!(kind, ShapeKind::ALL[b.category - 1]);
            let redraw = rasterize_shape(kind, rect, s.layout.lattice);
            assert_eq!(count, redraw.iter().filter(|&&v| v).count(), "seed {seed}");
            assert_eq!(tight_box(&redraw, s.layout.lattice).unwrap(), b.bbox);
        }
    }

    #[test]
    fn labeled_pixels_lie_in_a_box_of_their_category() {
        let cfg = ShapesConfig { max_objects: 5, ..Default::default() };
        for seed in 0..40 {
            let s = generate_shapes_sample(seed, &cfg).unwrap();
            let rasters: Vec<(usize, Vec<u8>)> = s
                .layout
                .boxes
                .iter()
                .map(|b| (b.category, rasterize_box(b, s.layout.lattice).unwrap()))
                .collect();
            for (p, &l) in s.labels.labels.iter().enumerate() {
                if l != 0 {
                    assert!(rasters.iter().any(|(c, m)| *c == l as usize && m[p] == 1));
                }
            }
        }
    }

    #[test]
    fn boxes_are_tight() {
        let lattice = Lattice::square(16).unwrap();
        for kind in ShapeKind::ALL {
            let rect = PixelRect { r0: 3, c0: 2, r1: 12, c1: 13 };
            let mask = rasterize_shape(kind, rect, lattice);
            let b = tight_box(&mask, lattice).unwrap();
            assert_eq!(b, [2.0 / 16.0, 3.0 / 16.0, 13.0 / 16.0, 12.0 / 16.0], "{kind:?}");
        }
    }

    #[test]
    fn config_is_checked() {
        assert!(ShapesConfig { classes: 7, ..Default::default() }.check().is_err());
        assert!(ShapesConfig { min_objects: 0, ..Default::default() }.check().is_err());
        assert_eq!(ShapesConfig::default().categories().unwrap().len(), 7);
    }
}
