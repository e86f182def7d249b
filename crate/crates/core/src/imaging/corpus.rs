//! Deterministic synthetic multi-label corpus.
//!
//! Each image shows a few distinct shape×colour objects over a low-amplitude
//! value-noise background. Everything about image `id` is derived from the
//! keyed stream `(seed, id)`, so images can be produced in any order.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, ManifestEntry, MANIFEST_VERSION};
use super::ppm::{self, Rgb8};
use crate::error::{Error, Result};
use crate::rng::{stream, Domain};

pub const MAX_CLASSES: usize = 16;
pub const MIN_SIZE: usize = 64;
/// Object diameter range as a fraction of the image side.
pub const OBJECT_SCALE: (f64, f64) = (0.15, 0.35);
/// Name of the geometry sidecar written next to the manifest.
pub const LAYOUT_FILE: &str = "layout.json";

const SHAPES: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Diamond];
const COLORS: [(&str, [f64; 3]); 4] = [
    ("red", [0.86, 0.16, 0.14]),
    ("green", [0.16, 0.74, 0.22]),
    ("blue", [0.14, 0.26, 0.86]),
    ("yellow", [0.92, 0.84, 0.16]),
];
const NOISE_CELL: usize = 8;
const NOISE_AMPLITUDE: f64 = 0.08;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Diamond,
}

impl Shape {
    fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Diamond => "diamond",
        }
    }

    /// Whether offset `(dy, dx)` from the centre falls inside a shape of radius `r`.
    fn contains(self, dy: f64, dx: f64, r: f64) -> bool {
        match self {
            Shape::Circle => dy * dy + dx * dx <= r * r,
            Shape::Square => dy.abs() <= 0.85 * r && dx.abs() <= 0.85 * r,
            Shape::Diamond => dy.abs() + dx.abs() <= r,
            Shape::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) * 0.5,
        }
    }
}

/// Class `c` is shape `c mod 4` in colour `c div 4`.
pub fn class_shape(class: usize) -> Shape {
    SHAPES[class % SHAPES.len()]
}

pub fn class_color(class: usize) -> [f64; 3] {
    COLORS[class / SHAPES.len()].1
}

pub fn class_names(num_classes: usize) -> Vec<String> {
    (0..num_classes)
        .map(|c| format!("{} {}", COLORS[c / SHAPES.len()].0, class_shape(c).name()))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub num_images: usize,
    pub size: usize,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub seed: u64,
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > MAX_CLASSES {
            return Err(Error::Config(format!(
                "num_classes must be in 1..={MAX_CLASSES}, got {}",
                self.num_classes
            )));
        }
        if self.min_objects < 1 || self.min_objects > self.max_objects {
            return Err(Error::Config(format!(
                "need 1 <= min_objects <= max_objects, got {}..{}",
                self.min_objects, self.max_objects
            )));
        }
        if self.max_objects > self.num_classes {
            return Err(Error::Config(format!(
                "max_objects {} exceeds num_classes {}: objects use distinct classes",
                self.max_objects, self.num_classes
            )));
        }
        if self.size < MIN_SIZE {
            return Err(Error::Config(format!(
                "image size must be at least {MIN_SIZE}, got {}",
                self.size
            )));
        }
        Ok(())
    }
}

/// Ground-truth placement of one object, in pixel units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectPlacement {
    pub class: usize,
    pub center_y: f64,
    pub center_x: f64,
    pub diameter: f64,
}

impl ObjectPlacement {
    /// Axis-aligned bounding box `(top, left, bottom, right)`.
    pub fn bbox(&self) -> (f64, f64, f64, f64) {
        let r = self.diameter / 2.0;
        (
            self.center_y - r,
            self.center_x - r,
            self.center_y + r,
            self.center_x + r,
        )
    }
}

/// Objects drawn on image `id`, in painting order.
pub fn layout(cfg: &CorpusConfig, id: u64) -> Vec<ObjectPlacement> {
    let mut rng = stream(cfg.seed, Domain::Corpus, &[id]);
    let count = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let side = cfg.size as f64;
    sample(&mut rng, cfg.num_classes, count)
        .into_iter()
        .map(|class| {
            let diameter = rng.random_range(OBJECT_SCALE.0..=OBJECT_SCALE.1) * side;
            let r = diameter / 2.0;
            ObjectPlacement {
                class,
                center_y: rng.random_range(r..=side - r),
                center_x: rng.random_range(r..=side - r),
                diameter,
            }
        })
        .collect()
}

/// Sorted label set of a layout.
pub fn labels_of(objects: &[ObjectPlacement]) -> Vec<usize> {
    let mut labels: Vec<usize> = objects.iter().map(|o| o.class).collect();
    labels.sort_unstable();
    labels
}

fn value_noise(cfg: &CorpusConfig, id: u64) -> Vec<f64> {
    let mut rng = stream(cfg.seed, Domain::Texture, &[id]);
    let cells = cfg.size / NOISE_CELL + 2;
    let lattice: Vec<f64> = (0..3 * cells * cells)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.42..0.58));
    let n = cfg.size;
    let mut out = vec![0.0; 3 * n * n];
    for c in 0..3 {
        for y in 0..n {
            let fy = y as f64 / NOISE_CELL as f64;
            let (iy, ty) = (fy.floor() as usize, fy.fract());
            for x in 0..n {
                let fx = x as f64 / NOISE_CELL as f64;
                let (ix, tx) = (fx.floor() as usize, fx.fract());
                let at = |yy: usize, xx: usize| lattice[(c * cells + yy) * cells + xx];
                let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
                let bottom = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
                out[(c * n + y) * n + x] = tint[c] + NOISE_AMPLITUDE * (top * (1.0 - ty) + bottom * ty);
            }
        }
    }
    out
}

/// Render image `id` as 8-bit RGB.
pub fn render(cfg: &CorpusConfig, id: u64, objects: &[ObjectPlacement]) -> Rgb8 {
    let n = cfg.size;
    let mut planes = value_noise(cfg, id);
    for obj in objects {
        let shape = class_shape(obj.class);
        let color = class_color(obj.class);
        let r = obj.diameter / 2.0;
        let (top, left, bottom, right) = obj.bbox();
        let y0 = top.floor().max(0.0) as usize;
        let y1 = (bottom.ceil() as usize).min(n);
        let x0 = left.floor().max(0.0) as usize;
        let x1 = (right.ceil() as usize).min(n);
        for y in y0..y1 {
            for x in x0..x1 {
                let dy = y as f64 + 0.5 - obj.center_y;
                let dx = x as f64 + 0.5 - obj.center_x;
                if shape.contains(dy, dx, r) {
                    for c in 0..3 {
                        // keep a trace of the background texture on the object
                        let i = (c * n + y) * n + x;
                        planes[i] = color[c] + 0.25 * (planes[i] - 0.5);
                    }
                }
            }
        }
    }
    let mut data = vec![0u8; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            for c in 0..3 {
                let v = planes[(c * n + y) * n + x].clamp(0.0, 1.0);
                data[(y * n + x) * 3 + c] = (v * 255.0).round() as u8;
            }
        }
    }
    Rgb8 {
        width: n,
        height: n,
        data,
    }
}

/// Ground-truth geometry for every image of a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusLayout {
    pub config: CorpusConfig,
    pub images: Vec<ImageLayout>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageLayout {
    pub id: u64,
    pub objects: Vec<ObjectPlacement>,
}

impl CorpusLayout {
    pub fn from_config(cfg: &CorpusConfig) -> Self {
        Self {
            config: cfg.clone(),
            images: (1..=cfg.num_images as u64)
                .map(|id| ImageLayout {
                    id,
                    objects: layout(cfg, id),
                })
                .collect(),
        }
    }

    pub fn objects(&self, id: u64) -> Option<&[ObjectPlacement]> {
        self.images
            .iter()
            .find(|im| im.id == id)
            .map(|im| im.objects.as_slice())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            detail: format!("malformed layout: {e}"),
        })
    }
}

pub fn image_path(id: u64) -> String {
    format!("img/{id:06}.ppm")
}

/// Write `num_images` images, `manifest.json` and the geometry sidecar into `out_dir`.
///
/// Image ids run from 1 to `num_images`.
pub fn generate_corpus(cfg: &CorpusConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let img_dir = out_dir.join("img");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let layout = CorpusLayout::from_config(cfg);
    let mut entries = Vec::with_capacity(cfg.num_images);
    for im in &layout.images {
        let path = image_path(im.id);
        ppm::write(&out_dir.join(&path), &render(cfg, im.id, &im.objects))?;
        entries.push(ManifestEntry {
            path,
            labels: labels_of(&im.objects),
            id: im.id,
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        class_names: class_names(cfg.num_classes),
        entries,
    };
    manifest.write(&out_dir.join("manifest.json"))?;
    let sidecar = out_dir.join(LAYOUT_FILE);
    fs::write(&sidecar, serde_json::to_string(&layout)?).map_err(|e| Error::io(&sidecar, e))?;
    Ok(manifest)
}
