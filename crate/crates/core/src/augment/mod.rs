//! Positive-pair generation: the block-wise scheme and the whole-image
//! two-crop baseline.

pub mod blocks;
pub mod oracle;
pub mod view;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use blocks::{block_rects, block_side, overlap_width, partition_blocks, BlockRect};
pub use view::{augment_region, augment_view, resize_crop, sample_crop, CropBox, ViewRecord};

use crate::error::{Error, Result};
use crate::imaging::ImageSample;
use crate::numcore::Tensor;
use crate::rng::{stream, Domain};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentMode {
    /// Four overlapping corner blocks, one positive pair per block.
    Bam,
    /// Two independent crops of the whole image.
    Global,
}

impl AugmentMode {
    pub fn pairs_per_image(self) -> usize {
        match self {
            AugmentMode::Bam => 4,
            AugmentMode::Global => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AugmentMode::Bam => "bam",
            AugmentMode::Global => "global",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub mode: AugmentMode,
    /// Block overlap: each block spans `0.5 + gamma` of each side.
    pub gamma: f64,
    /// Output side in pixels. 224 at full scale; 64 by default here.
    pub view_size: usize,
    /// Crop area as a fraction of the block (or image) area, `(lo, hi]`.
    pub zoom_range: (f64, f64),
    pub hflip_prob: f64,
    pub jitter_prob: f64,
    pub grayscale_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Shuffle pair order within a batch.
    pub obfuscate: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            mode: AugmentMode::Bam,
            gamma: 0.2,
            view_size: 64,
            zoom_range: (0.2, 1.0),
            hflip_prob: 0.5,
            jitter_prob: 0.8,
            grayscale_prob: 0.2,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            obfuscate: true,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 0.5), got {}", self.gamma)));
        }
        let (lo, hi) = self.zoom_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "zoom range must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi}]"
            )));
        }
        for (name, p) in [
            ("hflip_prob", self.hflip_prob),
            ("jitter_prob", self.jitter_prob),
            ("grayscale_prob", self.grayscale_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be a probability, got {p}")));
            }
        }
        for (name, s) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("{name} strength must be >= 0, got {s}")));
            }
        }
        if self.view_size < 8 {
            return Err(Error::Config(format!("view_size must be at least 8, got {}", self.view_size)));
        }
        Ok(())
    }
}

/// Aligned twin streams of augmented views.
///
/// Row `j` of `stream_a` and row `j` of `stream_b` always come from the same
/// block of the same image. `labels` is carried for diagnostics only.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewBatch {
    pub stream_a: Tensor<f64>,
    pub stream_b: Tensor<f64>,
    pub image_id: Vec<u64>,
    pub block_id: Vec<u8>,
    pub labels: Vec<Vec<usize>>,
    pub views_a: Vec<ViewRecord>,
    pub views_b: Vec<ViewRecord>,
    /// Output pair `j` is pair `permutation[j]` of the unshuffled
    /// image-major, block-minor order.
    pub permutation: Vec<usize>,
}

impl ViewBatch {
    pub fn len(&self) -> usize {
        self.image_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_id.is_empty()
    }

    /// Image id per row of the stacked `[stream_a; stream_b]` embedding batch.
    pub fn stacked_image_ids(&self) -> Vec<u64> {
        self.image_id.iter().chain(&self.image_id).copied().collect()
    }

    /// Label set per row of the stacked embedding batch.
    pub fn stacked_labels(&self) -> Vec<Vec<usize>> {
        self.labels.iter().chain(&self.labels).cloned().collect()
    }
}

/// Per-pair stream key: `(step, image id, block id, branch)`.
fn pair_rng(seed: u64, step: u64, image_id: u64, block: u8, branch: u8) -> crate::rng::StreamRng {
    stream(seed, Domain::Augment, &[step, image_id, u64::from(block), u64::from(branch)])
}

/// Build the positive pairs for one training step.
pub fn make_view_batch(images: &[ImageSample], cfg: &AugmentConfig, seed: u64, step: u64) -> Result<ViewBatch> {
    if images.is_empty() {
        return Err(Error::Precondition {
            op: "make_view_batch",
            detail: "empty image batch".into(),
        });
    }
    cfg.validate()?;
    let s = cfg.view_size;
    let view_len = 3 * s * s;
    let per_image = cfg.mode.pairs_per_image();
    let m = images.len() * per_image;

    let mut a = Vec::with_capacity(m * view_len);
    let mut b = Vec::with_capacity(m * view_len);
    let mut image_id = Vec::with_capacity(m);
    let mut block_id = Vec::with_capacity(m);
    let mut labels = Vec::with_capacity(m);
    let mut views_a = Vec::with_capacity(m);
    let mut views_b = Vec::with_capacity(m);
    for img in images {
        let regions: Vec<BlockRect> = match cfg.mode {
            AugmentMode::Bam => partition_blocks(img, cfg.gamma).to_vec(),
            AugmentMode::Global => vec![BlockRect {
                top: 0,
                left: 0,
                height: img.height(),
                width: img.width(),
            }],
        };
        for (blk, region) in regions.iter().enumerate() {
            let blk = blk as u8;
            let (va, ra) = augment_region(&img.pixels, region, cfg, &mut pair_rng(seed, step, img.id, blk, 0));
            let (vb, rb) = augment_region(&img.pixels, region, cfg, &mut pair_rng(seed, step, img.id, blk, 1));
            a.extend_from_slice(&va);
            b.extend_from_slice(&vb);
            image_id.push(img.id);
            block_id.push(blk);
            labels.push(img.labels.clone());
            views_a.push(ra);
            views_b.push(rb);
        }
    }

    let mut permutation: Vec<usize> = (0..m).collect();
    if cfg.obfuscate {
        permutation.shuffle(&mut stream(seed, Domain::Obfuscate, &[step]));
    }
    let gather = |src: &[f64]| -> Vec<f64> {
        permutation
            .iter()
            .flat_map(|&p| src[p * view_len..(p + 1) * view_len].iter().copied())
            .collect()
    };
    let shape = [m, 3, s, s];
    Ok(ViewBatch {
        stream_a: Tensor::new(shape, gather(&a))?,
        stream_b: Tensor::new(shape, gather(&b))?,
        image_id: permutation.iter().map(|&p| image_id[p]).collect(),
        block_id: permutation.iter().map(|&p| block_id[p]).collect(),
        labels: permutation.iter().map(|&p| labels[p].clone()).collect(),
        views_a: permutation.iter().map(|&p| views_a[p]).collect(),
        views_b: permutation.iter().map(|&p| views_b[p]).collect(),
        permutation,
    })
}
