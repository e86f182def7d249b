use crate::imaging::ImageSample;

/// Integer pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl BlockRect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }
}

/// Side of one block along an axis of length `side`.
///
/// `(0.5 + gamma)·side` rounded to the nearest pixel (halves up). Rounding
/// keeps the overlap `2·block − side` within one pixel of `2·gamma·side`, and
/// never yields less than `ceil(side / 2)`, so corner-anchored blocks always
/// tile the image.
pub fn block_side(side: usize, gamma: f64) -> usize {
    let exact = (0.5 + gamma) * side as f64;
    // absorb representation error such as 0.7 * 100 = 70.00000000000001
    let snapped = (exact * 1e9).round() / 1e9;
    (snapped.round() as usize).clamp(side.div_ceil(2), side)
}

/// Four equal overlapping blocks anchored at the image corners, in the order
/// top-left, top-right, bottom-left, bottom-right.
pub fn block_rects(height: usize, width: usize, gamma: f64) -> [BlockRect; 4] {
    let bh = block_side(height, gamma);
    let bw = block_side(width, gamma);
    let anchor = |top, left| BlockRect {
        top,
        left,
        height: bh,
        width: bw,
    };
    [
        anchor(0, 0),
        anchor(0, width - bw),
        anchor(height - bh, 0),
        anchor(height - bh, width - bw),
    ]
}

pub fn partition_blocks(image: &ImageSample, gamma: f64) -> [BlockRect; 4] {
    block_rects(image.height(), image.width(), gamma)
}

/// Width of the band shared by two horizontally adjacent blocks.
pub fn overlap_width(side: usize, gamma: f64) -> usize {
    2 * block_side(side, gamma) - side
}
