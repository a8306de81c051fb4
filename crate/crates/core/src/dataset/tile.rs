use super::LabeledImage;
use crate::bbox::BoundingBox;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Minimum fraction of a box's area that must survive clipping for the box
/// to be kept in a tile.
pub const MIN_RETAINED_AREA: f64 = 0.4;

/// One window cut from a larger image.
#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    pub sample: LabeledImage,
    /// Top-left corner of the window in source pixels.
    pub origin: (usize, usize),
    pub source_size: (usize, usize),
    /// Set when the source was smaller than the window and zero padding was added.
    pub padded: bool,
}

impl Tile {
    /// Maps a tile-normalized box back to source-normalized coordinates.
    pub fn to_global(&self, b: &BoundingBox) -> BoundingBox {
        let win_h = self.sample.image.shape()[1] as f64;
        let win_w = self.sample.image.shape()[2] as f64;
        let (sh, sw) = (self.source_size.0 as f64, self.source_size.1 as f64);
        let mut g = *b;
        g.cx = (b.cx * win_w + self.origin.0 as f64) / sw;
        g.cy = (b.cy * win_h + self.origin.1 as f64) / sh;
        g.w = b.w * win_w / sw;
        g.h = b.h * win_h / sh;
        g
    }
}

/// Window origins along one axis: stepped by `window - overlap`, with the
/// last window shifted inward to end exactly at the border.
fn starts(extent: usize, window: usize, overlap: usize) -> Vec<usize> {
    let step = window - overlap;
    let mut v = Vec::new();
    let mut s = 0;
    loop {
        if s + window >= extent {
            v.push(extent - window);
            break;
        }
        v.push(s);
        s += step;
    }
    v.dedup();
    v
}

/// Cuts `window × window` tiles with the given pixel overlap. Boxes are
/// clipped to each window and kept when at least [`MIN_RETAINED_AREA`] of
/// their area survives.
pub fn tile(sample: &LabeledImage, window: usize, overlap: usize) -> Result<Vec<Tile>> {
    if window == 0 {
        return Err(Error::Parameter("tile window must be positive".into()));
    }
    if overlap >= window {
        return Err(Error::Parameter(format!(
            "overlap {overlap} must be smaller than window {window}"
        )));
    }
    let s = sample.image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let padded = h < window || w < window;
    let xs = if w < window { vec![0] } else { starts(w, window, overlap) };
    let ys = if h < window { vec![0] } else { starts(h, window, overlap) };
    let src = sample.image.data();
    let mut tiles = Vec::with_capacity(xs.len() * ys.len());
    for &y0 in &ys {
        for &x0 in &xs {
            let image = Tensor::from_fn(vec![c, window, window], |i| {
                let x = x0 + i % window;
                let y = y0 + (i / window) % window;
                let ch = i / (window * window);
                if x < w && y < h {
                    src[(ch * h + y) * w + x]
                } else {
                    0.0
                }
            });
            let (wx0, wy0) = (x0 as f64, y0 as f64);
            let (wx1, wy1) = ((x0 + window).min(w) as f64, (y0 + window).min(h) as f64);
            let boxes = sample
                .boxes
                .iter()
                .filter_map(|b| {
                    let (bx0, by0, bx1, by1) = b.corners();
                    let (bx0, bx1) = (bx0 * w as f64, bx1 * w as f64);
                    let (by0, by1) = (by0 * h as f64, by1 * h as f64);
                    let area = (bx1 - bx0) * (by1 - by0);
                    let cx0 = bx0.max(wx0);
                    let cy0 = by0.max(wy0);
                    let cx1 = bx1.min(wx1);
                    let cy1 = by1.min(wy1);
                    if cx1 <= cx0 || cy1 <= cy0 || area <= 0.0 {
                        return None;
                    }
                    if (cx1 - cx0) * (cy1 - cy0) < MIN_RETAINED_AREA * area {
                        return None;
                    }
                    let win = window as f64;
                    let mut nb = BoundingBox::from_corners(
                        b.class_id,
                        (cx0 - wx0) / win,
                        (cy0 - wy0) / win,
                        (cx1 - wx0) / win,
                        (cy1 - wy0) / win,
                    );
                    nb.confidence = b.confidence;
                    Some(nb)
                })
                .collect();
            tiles.push(Tile {
                sample: LabeledImage {
                    image,
                    boxes,
                    source: format!("{}_x{x0}_y{y0}", sample.source),
                },
                origin: (x0, y0),
                source_size: (h, w),
                padded,
            });
        }
    }
    Ok(tiles)
}
