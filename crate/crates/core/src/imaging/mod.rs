//! Images, the on-disk dataset format and the synthetic corpus generator.

pub mod corpus;
pub mod manifest;
pub mod ppm;

use std::path::Path;

pub use corpus::{generate_corpus, CorpusConfig, CorpusLayout, ObjectPlacement};
pub use manifest::{DatasetManifest, ManifestEntry};
pub use ppm::Rgb8;

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// One labelled image; `pixels` is `3×H×W` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: u64,
    pub pixels: Tensor<f64>,
    pub labels: Vec<usize>,
}

impl ImageSample {
    pub fn from_rgb8(id: u64, img: &Rgb8, labels: Vec<usize>) -> Self {
        let (h, w) = (img.height, img.width);
        let mut data = vec![0.0; 3 * h * w];
        for (p, px) in img.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * h * w + p] = f64::from(px[c]) / 255.0;
            }
        }
        Self {
            id,
            pixels: Tensor::new([3, h, w], data).expect("raster size"),
            labels,
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }
}

/// Load every entry of a manifest, in manifest order.
pub fn load_dataset(manifest_path: &Path) -> Result<Vec<ImageSample>> {
    let manifest = DatasetManifest::read(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    manifest
        .entries
        .iter()
        .map(|e| {
            let path = root.join(&e.path);
            let img = ppm::read(&path).map_err(|err| match err {
                Error::Load { path, detail } => Error::Load {
                    path,
                    detail: format!("entry {}: {detail}", e.id),
                },
                other => other,
            })?;
            Ok(ImageSample::from_rgb8(e.id, &img, e.labels.clone()))
        })
        .collect()
}

/// Render a corpus in memory without touching the filesystem.
pub fn synthesize(cfg: &CorpusConfig) -> Result<(Vec<ImageSample>, CorpusLayout)> {
    cfg.validate()?;
    let layout = CorpusLayout::from_config(cfg);
    let samples = layout
        .images
        .iter()
        .map(|im| {
            let img = corpus::render(cfg, im.id, &im.objects);
            ImageSample::from_rgb8(im.id, &img, corpus::labels_of(&im.objects))
        })
        .collect();
    Ok((samples, layout))
}

#[cfg(test)]
mod tests;
