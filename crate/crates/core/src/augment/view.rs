use rand::Rng;

use super::blocks::BlockRect;
use super::AugmentConfig;
use crate::numcore::Tensor;

/// Continuous crop rectangle in source-image pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CropBox {
    pub top: f64,
    pub left: f64,
    pub height: f64,
    pub width: f64,
}

impl CropBox {
    pub fn area(&self) -> f64 {
        self.height * self.width
    }

    pub fn bottom(&self) -> f64 {
        self.top + self.height
    }

    pub fn right(&self) -> f64 {
        self.left + self.width
    }
}

/// What the random pipeline did to produce one view.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ViewRecord {
    pub crop: CropBox,
    /// Crop area divided by the area of the region it was cut from.
    pub area_fraction: f64,
    pub flipped: bool,
    pub jittered: bool,
    pub grayscale: bool,
}

const LOG_ASPECT: (f64, f64) = (-0.287_682_072_451_780_9, 0.287_682_072_451_780_9); // ln(3/4), ln(4/3)

/// Random-resized-crop geometry inside `region`.
///
/// The area fraction is drawn uniformly from `zoom` and is realised exactly;
/// the log-aspect ratio is uniform over `[ln 3/4, ln 4/3]` and is clamped
/// only as far as needed for the box to fit.
pub fn sample_crop(region: &BlockRect, zoom: (f64, f64), rng: &mut impl Rng) -> (CropBox, f64) {
    let (h, w) = (region.height as f64, region.width as f64);
    let fraction = if zoom.0 < zoom.1 {
        rng.random_range(zoom.0..=zoom.1)
    } else {
        zoom.1
    };
    let area = fraction * h * w;
    let ratio = rng
        .random_range(LOG_ASPECT.0..=LOG_ASPECT.1)
        .exp()
        .clamp(area / (h * h), (w * w) / area);
    let cw = (area * ratio).sqrt().min(w);
    let ch = (area / ratio).sqrt().min(h);
    let top = region.top as f64 + rng.random_range(0.0..=(h - ch).max(0.0));
    let left = region.left as f64 + rng.random_range(0.0..=(w - cw).max(0.0));
    (
        CropBox {
            top,
            left,
            height: ch,
            width: cw,
        },
        ch * cw / (h * w),
    )
}

/// Bilinear resample of `crop` to `size×size`, never reading outside `region`.
pub fn resize_crop(pixels: &Tensor<f64>, region: &BlockRect, crop: &CropBox, size: usize) -> Vec<f64> {
    let (hh, ww) = (pixels.shape()[1], pixels.shape()[2]);
    let src = pixels.data();
    let y_lo = region.top as f64;
    let y_hi = (region.top + region.height - 1) as f64;
    let x_lo = region.left as f64;
    let x_hi = (region.left + region.width - 1) as f64;
    let sy = crop.height / size as f64;
    let sx = crop.width / size as f64;
    let taps = |i: usize, origin: f64, step: f64, lo: f64, hi: f64| {
        let p = (origin + (i as f64 + 0.5) * step - 0.5).clamp(lo, hi);
        let p0 = p.floor();
        let t = p - p0;
        let p0 = p0 as usize;
        let p1 = if t > 0.0 { p0 + 1 } else { p0 };
        (p0, p1, t)
    };
    let ys: Vec<_> = (0..size).map(|i| taps(i, crop.top, sy, y_lo, y_hi)).collect();
    let xs: Vec<_> = (0..size).map(|j| taps(j, crop.left, sx, x_lo, x_hi)).collect();
    let mut out = vec![0.0; 3 * size * size];
    for c in 0..3 {
        let plane = &src[c * hh * ww..(c + 1) * hh * ww];
        for (i, &(y0, y1, ty)) in ys.iter().enumerate() {
            for (j, &(x0, x1, tx)) in xs.iter().enumerate() {
                let top = plane[y0 * ww + x0] * (1.0 - tx) + plane[y0 * ww + x1] * tx;
                let bottom = plane[y1 * ww + x0] * (1.0 - tx) + plane[y1 * ww + x1] * tx;
                out[(c * size + i) * size + j] = top * (1.0 - ty) + bottom * ty;
            }
        }
    }
    out
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn hflip(img: &mut [f64], size: usize) {
    for row in img.chunks_mut(size) {
        row.reverse();
    }
}

fn to_gray(img: &mut [f64], n: usize) {
    for p in 0..n {
        let y = luma(img[p], img[n + p], img[2 * n + p]);
        img[p] = y;
        img[n + p] = y;
        img[2 * n + p] = y;
    }
}

fn clamp01(img: &mut [f64]) {
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

fn jitter_factor(strength: f64, rng: &mut impl Rng) -> f64 {
    if strength > 0.0 {
        rng.random_range((1.0 - strength).max(0.0)..=1.0 + strength)
    } else {
        1.0
    }
}

/// Brightness, contrast, then saturation, each a blend toward a reference.
fn color_jitter(img: &mut [f64], n: usize, cfg: &AugmentConfig, rng: &mut impl Rng) {
    let b = jitter_factor(cfg.brightness, rng);
    let c = jitter_factor(cfg.contrast, rng);
    let s = jitter_factor(cfg.saturation, rng);
    img.iter_mut().for_each(|v| *v *= b);
    clamp01(img);
    let mean = (0..n).map(|p| luma(img[p], img[n + p], img[2 * n + p])).sum::<f64>() / n as f64;
    img.iter_mut().for_each(|v| *v = c * *v + (1.0 - c) * mean);
    clamp01(img);
    for p in 0..n {
        let y = luma(img[p], img[n + p], img[2 * n + p]);
        for ch in 0..3 {
            let v = &mut img[ch * n + p];
            *v = s * *v + (1.0 - s) * y;
        }
    }
    clamp01(img);
}

/// Augmented `3×s×s` view of `region` of a `3×H×W` image.
pub fn augment_region(
    pixels: &Tensor<f64>,
    region: &BlockRect,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> (Vec<f64>, ViewRecord) {
    let s = cfg.view_size;
    let n = s * s;
    let (crop, area_fraction) = sample_crop(region, cfg.zoom_range, rng);
    let mut img = resize_crop(pixels, region, &crop, s);
    // draw every decision unconditionally so the stream layout is fixed
    let flipped = rng.random_bool(cfg.hflip_prob);
    let jittered = rng.random_bool(cfg.jitter_prob);
    let grayscale = rng.random_bool(cfg.grayscale_prob);
    if flipped {
        for c in 0..3 {
            hflip(&mut img[c * n..(c + 1) * n], s);
        }
    }
    if jittered {
        color_jitter(&mut img, n, cfg, rng);
    }
    if grayscale {
        to_gray(&mut img, n);
    }
    clamp01(&mut img);
    (
        img,
        ViewRecord {
            crop,
            area_fraction,
            flipped,
            jittered,
            grayscale,
        },
    )
}

/// Augmented view of a whole block given as its own `3×h×w` tensor.
pub fn augment_view(block_pixels: &Tensor<f64>, cfg: &AugmentConfig, rng: &mut impl Rng) -> (Tensor<f64>, ViewRecord) {
    let region = BlockRect {
        top: 0,
        left: 0,
        height: block_pixels.shape()[1],
        width: block_pixels.shape()[2],
    };
    let (data, rec) = augment_region(block_pixels, &region, cfg, rng);
    let s = cfg.view_size;
    (Tensor::new([3, s, s], data).expect("view size"), rec)
}
