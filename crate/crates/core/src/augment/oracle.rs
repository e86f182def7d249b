//! Ground-truth semantic agreement of positive pairs, from generator geometry.

use super::{CropBox, ViewBatch};
use crate::imaging::{CorpusLayout, ObjectPlacement};

/// An object counts as visible in a crop when at least this fraction of its
/// bounding box lies inside the crop.
pub const VISIBLE_FRACTION: f64 = 0.5;

/// Classes of the objects visible in `crop`, sorted.
pub fn visible_classes(objects: &[ObjectPlacement], crop: &CropBox) -> Vec<usize> {
    let mut out: Vec<usize> = objects
        .iter()
        .filter(|o| {
            let (t, l, b, r) = o.bbox();
            let oy = (b.min(crop.bottom()) - t.max(crop.top)).max(0.0);
            let ox = (r.min(crop.right()) - l.max(crop.left)).max(0.0);
            oy * ox >= VISIBLE_FRACTION * (b - t) * (r - l)
        })
        .map(|o| o.class)
        .collect();
    out.sort_unstable();
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize)]
pub struct AgreementStats {
    pub pairs: usize,
    /// Pairs whose two views share at least one visible object.
    pub intersect_rate: f64,
    /// Pairs whose two views show exactly the same object set.
    pub identical_rate: f64,
    pub mean_jaccard: f64,
    /// Pairs where at least one view shows no object.
    pub empty_view_rate: f64,
}

#[derive(Default)]
pub struct AgreementCounter {
    pairs: usize,
    intersect: usize,
    identical: usize,
    jaccard: f64,
    empty: usize,
}

impl AgreementCounter {
    pub fn add_batch(&mut self, batch: &ViewBatch, layout: &CorpusLayout) {
        for j in 0..batch.len() {
            let objects = layout
                .objects(batch.image_id[j])
                .expect("batch image present in layout");
            let a = visible_classes(objects, &batch.views_a[j].crop);
            let b = visible_classes(objects, &batch.views_b[j].crop);
            let common = a.iter().filter(|c| b.contains(c)).count();
            let union = a.len() + b.len() - common;
            self.pairs += 1;
            self.intersect += (common > 0) as usize;
            self.identical += (a == b) as usize;
            self.empty += (a.is_empty() || b.is_empty()) as usize;
            self.jaccard += if union == 0 { 1.0 } else { common as f64 / union as f64 };
        }
    }

    pub fn finish(&self) -> AgreementStats {
        let n = self.pairs.max(1) as f64;
        AgreementStats {
            pairs: self.pairs,
            intersect_rate: self.intersect as f64 / n,
            identical_rate: self.identical as f64 / n,
            mean_jaccard: self.jaccard / n,
            empty_view_rate: self.empty as f64 / n,
        }
    }
}
