//! Differentiable placement of a square patch onto labeled objects.
//!
//! Each placement is sized from the object's area, centered on the box,
//! rotated, brightness/contrast/noise jittered and alpha-composited. Random
//! draws are first materialized into a [`JitterLog`], and rendering is a pure
//! function of that log, so any application can be replayed exactly.

use std::collections::BTreeSet;
use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BoundingBox;
use crate::diffcore::{Graph, NodeId, Real, SampleGeometry, Tensor};
use crate::error::{Error, Result};
use crate::imageio;

/// Default patch resolution.
pub const PATCH_SIZE: usize = 32;

/// An optimizable `[3, P, P]` patch image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub pixels: Tensor<f32>,
    pub name: String,
}

impl Patch {
    pub fn new(name: impl Into<String>, pixels: Tensor<f32>) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 3 || s[0] != 3 || s[1] != s[2] || s[1] < 2 {
            return Err(Error::dim(
                "patch",
                format!("expected square [3,P,P] with P >= 2, got {s:?}"),
            ));
        }
        Ok(Self {
            pixels,
            name: name.into(),
        })
    }

    pub fn side(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn clamp_unit(&mut self) {
        self.pixels
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    /// Replaces every channel by the per-pixel channel mean.
    pub fn project_grayscale(&mut self) {
        let plane = self.side() * self.side();
        let d = self.pixels.data_mut();
        for i in 0..plane {
            let m = (d[i] + d[plane + i] + d[2 * plane + i]) / 3.0;
            d[i] = m;
            d[plane + i] = m;
            d[2 * plane + i] = m;
        }
    }

    pub fn is_grayscale(&self) -> bool {
        let plane = self.side() * self.side();
        let d = self.pixels.data();
        (0..plane).all(|i| d[i] == d[plane + i] && d[i] == d[2 * plane + i])
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        imageio::write_png(&self.pixels, path)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let pixels = imageio::read_png(path)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::new(name, pixels).map_err(|e| Error::input(path, e))
    }
}

/// Placement and jitter settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApplyConfig {
    /// Patch area as a fraction of the object's box area.
    pub size_fraction: f64,
    /// 1 is opaque, 0 invisible.
    pub alpha: f64,
    /// Rotation drawn from `±rotation_range` radians.
    pub rotation_range: f64,
    /// Per-pixel uniform noise amplitude.
    pub noise_amp: f64,
    /// Additive brightness drawn from `±brightness`.
    pub brightness: f64,
    /// Multiplicative contrast drawn from `1 ± contrast`.
    pub contrast: f64,
    pub seed: u64,
}

impl Default for ApplyConfig {
    fn default() -> Self {
        Self {
            size_fraction: 0.2,
            alpha: 1.0,
            rotation_range: 20f64.to_radians(),
            noise_amp: 0.1,
            brightness: 0.1,
            contrast: 0.1,
            seed: 0,
        }
    }
}

impl ApplyConfig {
    /// No rotation, noise, brightness or contrast jitter.
    pub fn without_jitter(size_fraction: f64, alpha: f64) -> Self {
        Self {
            size_fraction,
            alpha,
            rotation_range: 0.0,
            noise_amp: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.size_fraction > 0.0 && self.size_fraction <= 1.0) {
            return Err(Error::Parameter(format!(
                "size_fraction must lie in (0,1], got {}",
                self.size_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Parameter(format!(
                "alpha must lie in [0,1], got {}",
                self.alpha
            )));
        }
        if !(0.0..=0.5).contains(&self.noise_amp) {
            return Err(Error::Parameter(format!(
                "noise_amp must lie in [0,0.5], got {}",
                self.noise_amp
            )));
        }
        if self.rotation_range < 0.0 || self.brightness < 0.0 || !(0.0..1.0).contains(&self.contrast)
        {
            return Err(Error::Parameter("jitter ranges must be non-negative".into()));
        }
        Ok(())
    }
}

/// Side in pixels of the square patch placed on `bbox`:
/// `round(sqrt(size_fraction · w_px · h_px))`, at least 2. `None` for a
/// zero-area box.
pub fn patch_side(bbox: &BoundingBox, size_fraction: f64, image_size: (usize, usize)) -> Option<usize> {
    let (w, h) = bbox.pixel_extent(image_size);
    if !(w > 0.0 && h > 0.0) {
        return None;
    }
    Some(((size_fraction * w * h).sqrt().round() as usize).max(2))
}

/// One realized placement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub box_index: usize,
    pub class_id: usize,
    pub side: usize,
    /// Center in output pixel coordinates (pixel centers at integers).
    pub center_px: (f64, f64),
    pub rotation: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub noise_seed: u64,
}

impl Placement {
    /// Axis-aligned placement square in normalized coordinates.
    pub fn bbox(&self, image_size: (usize, usize), class_id: usize) -> BoundingBox {
        let (h, w) = (image_size.0 as f64, image_size.1 as f64);
        BoundingBox::new(
            class_id,
            (self.center_px.0 + 0.5) / w,
            (self.center_px.1 + 0.5) / h,
            self.side as f64 / w,
            self.side as f64 / h,
        )
    }
}

/// Everything random about one application; sufficient to replay it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JitterLog {
    pub image_size: (usize, usize),
    pub noise_amp: f64,
    pub placements: Vec<Placement>,
    /// `(box index, reason)` for boxes that could not carry a patch.
    pub skipped: Vec<(usize, String)>,
}

impl JitterLog {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("serializable")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Parse {
            line: e.line(),
            detail: e.to_string(),
        })
    }
}

/// Draws placements for every box whose class is in `targets`, in label order.
pub fn sample_jitter(
    boxes: &[BoundingBox],
    cfg: &ApplyConfig,
    targets: &BTreeSet<usize>,
    image_size: (usize, usize),
    rng: &mut impl Rng,
) -> JitterLog {
    let mut log = JitterLog {
        image_size,
        noise_amp: cfg.noise_amp,
        ..Default::default()
    };
    for (i, b) in boxes.iter().enumerate() {
        if !targets.contains(&b.class_id) {
            continue;
        }
        let Some(side) = patch_side(b, cfg.size_fraction, image_size) else {
            warn!("box {i} has zero area; no patch placed");
            log.skipped.push((i, "zero-area box".into()));
            continue;
        };
        let sym = |rng: &mut dyn rand::RngCore, r: f64| {
            if r > 0.0 {
                rng.gen_range(-r..=r)
            } else {
                0.0
            }
        };
        let rotation = sym(rng, cfg.rotation_range);
        let brightness = sym(rng, cfg.brightness);
        let contrast = 1.0 + sym(rng, cfg.contrast);
        log.placements.push(Placement {
            box_index: i,
            class_id: b.class_id,
            side,
            center_px: (
                b.cx * image_size.1 as f64 - 0.5,
                b.cy * image_size.0 as f64 - 0.5,
            ),
            rotation,
            brightness,
            contrast,
            noise_seed: rng.gen(),
        });
    }
    log
}

/// Records every placement of `log` on the graph and returns the patched
/// image node. `image` is `[3,H,W]`, `patch` is `[3,P,P]`.
pub fn render_placements<T: Real>(
    g: &mut Graph<T>,
    image: NodeId,
    patch: NodeId,
    log: &JitterLog,
    alpha: f64,
) -> Result<NodeId> {
    let (h, w) = log.image_size;
    let p = g.shape(patch)[1] as f64;
    let mut out = image;
    for pl in &log.placements {
        let geo = SampleGeometry {
            rotation: pl.rotation,
            scale: pl.side as f64 / p,
            center: pl.center_px,
            out_size: (h, w),
        };
        let (mut warped, mask) = g.affine_sample_at(patch, geo)?;
        let identity = pl.contrast == 1.0 && pl.brightness == 0.0 && log.noise_amp == 0.0;
        if !identity {
            warped = g.scale(warped, T::from_f64_lossy(pl.contrast));
            warped = g.add_scalar(warped, T::from_f64_lossy(pl.brightness));
            if log.noise_amp > 0.0 {
                let noise = noise_field::<T>(&mask, log.noise_amp, pl.noise_seed);
                let noise = g.constant(noise);
                warped = g.add(warped, noise)?;
            }
            warped = g.clamp(warped, T::zero(), T::one());
        }
        out = g.alpha_composite(out, warped, &mask, alpha)?;
    }
    Ok(out)
}

/// `[3,H,W]` uniform noise in `±amp`, nonzero only under the mask.
fn noise_field<T: Real>(mask: &Tensor<T>, amp: f64, seed: u64) -> Tensor<T> {
    let plane = mask.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![T::zero(); 3 * plane];
    for (i, &m) in mask.data().iter().enumerate() {
        if m != T::zero() {
            for c in 0..3 {
                data[c * plane + i] = T::from_f64_lossy(rng.gen_range(-amp..=amp));
            }
        }
    }
    let s = mask.shape();
    Tensor::new(vec![3, s[1], s[2]], data).expect("mask-shaped")
}

/// Applies `patch` to every target-class box of one image.
pub fn apply_patches(
    image: &Tensor<f32>,
    boxes: &[BoundingBox],
    patch: &Patch,
    cfg: &ApplyConfig,
    targets: &BTreeSet<usize>,
) -> Result<(Tensor<f32>, JitterLog)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    apply_patches_with(image, boxes, patch, cfg, targets, &mut rng)
}

pub fn apply_patches_with(
    image: &Tensor<f32>,
    boxes: &[BoundingBox],
    patch: &Patch,
    cfg: &ApplyConfig,
    targets: &BTreeSet<usize>,
    rng: &mut impl Rng,
) -> Result<(Tensor<f32>, JitterLog)> {
    cfg.validate()?;
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::dim("channels", format!("expected [3,H,W], got {s:?}")));
    }
    let log = sample_jitter(boxes, cfg, targets, (s[1], s[2]), rng);
    let out = replay(image, patch, &log, cfg.alpha)?;
    Ok((out, log))
}

/// Re-renders a logged application.
pub fn replay(image: &Tensor<f32>, patch: &Patch, log: &JitterLog, alpha: f64) -> Result<Tensor<f32>> {
    if log.placements.is_empty() {
        return Ok(image.clone());
    }
    let mut g = Graph::<f32>::new();
    let x = g.constant(image.clone());
    let p = g.constant(patch.pixels.clone());
    let out = render_placements(&mut g, x, p, log, alpha)?;
    Ok(g.value(out).clone())
}
