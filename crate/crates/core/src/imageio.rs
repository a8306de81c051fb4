//! PNG I/O for `[3,H,W]` images with values in `[0,1]`.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Reads an 8-bit RGB PNG into a `[3,H,W]` tensor, `value = byte / 255`.
pub fn read_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::input(path, e))?
        .to_rgb8();
    Ok(from_rgb8(&img))
}

pub fn from_rgb8(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data).expect("consistent shape")
}

/// Converts with `byte = round(255 · clamp(pixel, 0, 1))`.
pub fn to_rgb8(t: &Tensor<f32>) -> Result<RgbImage> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::dim("channels", format!("expected [3,H,W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = t.data();
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([q(d[i]), q(d[h * w + i]), q(d[2 * h * w + i])])
    }))
}

pub fn write_png(t: &Tensor<f32>, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    to_rgb8(t)?
        .save(path)
        .map_err(|e| Error::input(path, e))
}

/// Half-pixel-centered bilinear resize with edge clamping.
pub fn resize_bilinear(src: &Tensor<f32>, out_h: usize, out_w: usize) -> Tensor<f32> {
    let s = src.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = src.data();
    let mut out = vec![0.0f32; c * out_h * out_w];
    for oy in 0..out_h {
        let sy = ((oy as f64 + 0.5) * h as f64 / out_h as f64 - 0.5).clamp(0.0, h as f64 - 1.0);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..out_w {
            let sx =
                ((ox as f64 + 0.5) * w as f64 / out_w as f64 - 0.5).clamp(0.0, w as f64 - 1.0);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            for ch in 0..c {
                let p = |y: usize, x: usize| d[(ch * h + y) * w + x] as f64;
                let v = p(y0, x0) * (1.0 - fx) * (1.0 - fy)
                    + p(y0, x1) * fx * (1.0 - fy)
                    + p(y1, x0) * (1.0 - fx) * fy
                    + p(y1, x1) * fx * fy;
                out[(ch * out_h + oy) * out_w + ox] = v as f32;
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out).expect("consistent shape")
}
