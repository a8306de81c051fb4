//! Procedural overhead scenes: textured ground, gray clutter, and
//! axis-aligned rectangular vehicles with per-class color and footprint.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::LabeledImage;
use crate::bbox::{BoundingBox, ClassMap};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::kv::KeyValues;

/// Footprint (length × width, pixels at the reference 104 px scene) and
/// paint color of one object class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPrior {
    pub length: f64,
    pub width: f64,
    pub color: [f32; 3],
}

/// Priors for the named vehicle classes; other names get a deterministic
/// fallback derived from their position.
pub fn class_prior(name: &str, index: usize) -> ClassPrior {
    let (length, width, color) = match name {
        "bus" => (40.0, 15.0, [0.93, 0.80, 0.16]),
        "car" => (20.0, 13.0, [0.16, 0.32, 0.88]),
        "truck" => (30.0, 16.0, [0.84, 0.16, 0.12]),
        "van" => (24.0, 18.0, [0.20, 0.70, 0.28]),
        _ => {
            let hue = (index as f32 * 0.618_034) % 1.0;
            let c = hsv(hue, 0.8, 0.85);
            (16.0 + 4.0 * (index % 5) as f64, 12.0 + 2.0 * (index % 3) as f64, c)
        }
    };
    ClassPrior {
        length,
        width,
        color,
    }
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub image_size: usize,
    /// Inclusive range of vehicles per scene.
    pub n_objects: (usize, usize),
    pub classes: ClassMap,
    /// Relative class frequencies; empty means uniform.
    pub class_weights: Vec<f64>,
    /// Inclusive range of the footprint scale factor.
    pub size_range: (f64, f64),
    /// Maximum number of gray distractor blocks.
    pub clutter: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 104,
            n_objects: (1, 4),
            classes: ClassMap::vehicles(),
            class_weights: Vec::new(),
            size_range: (0.85, 1.15),
            clutter: 4,
        }
    }
}

impl SynthConfig {
    pub fn class_distribution(&self) -> Vec<f64> {
        let k = self.classes.len();
        let w = if self.class_weights.is_empty() {
            vec![1.0; k]
        } else {
            self.class_weights.clone()
        };
        let s: f64 = w.iter().sum();
        w.into_iter().map(|v| v / s).collect()
    }

    /// Keys: `image_size`, `min_objects`, `max_objects`, `classes` and
    /// `class_weights` (comma lists), `size_min`, `size_max`, `clutter`.
    /// Missing keys take their defaults.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let list = |key: &str| -> Option<Vec<String>> {
            kv.get_str(key)
                .map(|s| s.split(',').map(|p| p.trim().to_string()).filter(|p| !p.is_empty()).collect())
        };
        let classes = match list("classes") {
            Some(names) => ClassMap::new(names)?,
            None => d.classes,
        };
        let class_weights = match list("class_weights") {
            Some(ws) => ws
                .iter()
                .map(|w| {
                    w.parse::<f64>()
                        .map_err(|e| Error::Parameter(format!("class weight `{w}`: {e}")))
                })
                .collect::<Result<_>>()?,
            None => d.class_weights,
        };
        let cfg = Self {
            image_size: kv.get("image_size")?.unwrap_or(d.image_size),
            n_objects: (
                kv.get("min_objects")?.unwrap_or(d.n_objects.0),
                kv.get("max_objects")?.unwrap_or(d.n_objects.1),
            ),
            classes,
            class_weights,
            size_range: (
                kv.get("size_min")?.unwrap_or(d.size_range.0),
                kv.get("size_max")?.unwrap_or(d.size_range.1),
            ),
            clutter: kv.get("clutter")?.unwrap_or(d.clutter),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("image_size", self.image_size);
        kv.set("min_objects", self.n_objects.0);
        kv.set("max_objects", self.n_objects.1);
        kv.set("classes", self.classes.names().join(","));
        if !self.class_weights.is_empty() {
            let w: Vec<String> = self.class_weights.iter().map(f64::to_string).collect();
            kv.set("class_weights", w.join(","));
        }
        kv.set("size_min", self.size_range.0);
        kv.set("size_max", self.size_range.1);
        kv.set("clutter", self.clutter);
        kv
    }

    fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::Parameter("synthetic scenes need image_size >= 16".into()));
        }
        if self.n_objects.0 > self.n_objects.1 {
            return Err(Error::Parameter("n_objects range is reversed".into()));
        }
        if self.n_objects.1 > 0 && self.classes.is_empty() {
            return Err(Error::Parameter("objects requested with no classes".into()));
        }
        if !self.class_weights.is_empty()
            && (self.class_weights.len() != self.classes.len()
                || self.class_weights.iter().any(|w| !(*w >= 0.0))
                || self.class_weights.iter().sum::<f64>() <= 0.0)
        {
            return Err(Error::Parameter(
                "class_weights must be non-negative, one per class".into(),
            ));
        }
        if !(self.size_range.0 > 0.0 && self.size_range.0 <= self.size_range.1) {
            return Err(Error::Parameter("size_range must be positive and ordered".into()));
        }
        Ok(())
    }
}

struct Canvas {
    size: usize,
    data: Vec<f32>,
}

impl Canvas {
    fn fill_rect(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, color: [f32; 3]) {
        let n = self.size;
        for c in 0..3 {
            for y in y0..y1.min(n) {
                for x in x0..x1.min(n) {
                    self.data[(c * n + y) * n + x] = color[c];
                }
            }
        }
    }
}

fn overlaps(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize), margin: usize) -> bool {
    a.0 < b.2 + margin && b.0 < a.2 + margin && a.1 < b.3 + margin && b.1 < a.3 + margin
}

/// Generates one labeled scene; identical seeds give identical scenes.
pub fn synth_scene(seed: u64, cfg: &SynthConfig) -> Result<LabeledImage> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.image_size;
    let scale = n as f64 / 104.0;

    // Ground: muted base color, two low-frequency undulations, pixel grain.
    let base = [
        rng.gen_range(0.38..0.52f32),
        rng.gen_range(0.40..0.52f32),
        rng.gen_range(0.34..0.46f32),
    ];
    let waves: Vec<(f32, f32, f32, f32)> = (0..2)
        .map(|_| {
            (
                rng.gen_range(0.02..0.12f32),
                rng.gen_range(0.02..0.12f32),
                rng.gen_range(0.0..std::f32::consts::TAU),
                rng.gen_range(0.03..0.07f32),
            )
        })
        .collect();
    let mut canvas = Canvas {
        size: n,
        data: vec![0.0; 3 * n * n],
    };
    for y in 0..n {
        for x in 0..n {
            let mut v: f32 = waves
                .iter()
                .map(|&(fx, fy, ph, amp)| amp * (fx * x as f32 + fy * y as f32 + ph).sin())
                .sum();
            v += rng.gen_range(-0.04..0.04f32);
            for c in 0..3 {
                canvas.data[(c * n + y) * n + x] = (base[c] + v).clamp(0.0, 1.0);
            }
        }
    }

    // Clutter: desaturated blocks (roofs, pavement, shadows).
    let n_clutter = if cfg.clutter > 0 {
        rng.gen_range(0..=cfg.clutter)
    } else {
        0
    };
    for _ in 0..n_clutter {
        let w = rng.gen_range((6.0 * scale) as usize..=(30.0 * scale) as usize).max(1);
        let h = rng.gen_range((6.0 * scale) as usize..=(30.0 * scale) as usize).max(1);
        let x0 = rng.gen_range(0..n.saturating_sub(w).max(1));
        let y0 = rng.gen_range(0..n.saturating_sub(h).max(1));
        let g = rng.gen_range(0.2..0.75f32);
        let tint = rng.gen_range(-0.04..0.04f32);
        canvas.fill_rect(x0, y0, x0 + w, y0 + h, [g + tint, g, g - tint]);
    }

    let n_obj = rng.gen_range(cfg.n_objects.0..=cfg.n_objects.1);
    let dist = if n_obj > 0 {
        Some(WeightedIndex::new(cfg.class_distribution()).map_err(|e| Error::Parameter(e.to_string()))?)
    } else {
        None
    };
    let mut placed: Vec<(usize, usize, usize, usize)> = Vec::new();
    let mut boxes = Vec::new();
    for _ in 0..n_obj {
        let class_id = dist.as_ref().unwrap().sample(&mut rng);
        let name = cfg.classes.name(class_id).unwrap_or("");
        let prior = class_prior(name, class_id);
        let f = rng.gen_range(cfg.size_range.0..=cfg.size_range.1) * scale;
        let len = ((prior.length * f).round() as usize).clamp(2, n - 2);
        let wid = ((prior.width * f).round() as usize).clamp(2, n - 2);
        let (w, h) = if rng.gen_bool(0.5) { (len, wid) } else { (wid, len) };
        let color = prior.color.map(|c| (c + rng.gen_range(-0.06..0.06f32)).clamp(0.0, 1.0));
        let mut spot = None;
        for _ in 0..100 {
            let x0 = rng.gen_range(1..n - w);
            let y0 = rng.gen_range(1..n - h);
            let r = (x0, y0, x0 + w, y0 + h);
            if placed.iter().all(|&p| !overlaps(p, r, 2)) {
                spot = Some(r);
                break;
            }
        }
        let Some(r @ (x0, y0, x1, y1)) = spot else { continue };
        placed.push(r);
        canvas.fill_rect(x0, y0, x1, y1, color);
        // Windshield band across the front quarter of the long axis.
        let shade = color.map(|c| c * 0.45);
        if w >= h {
            let band = (w / 5).max(1);
            canvas.fill_rect(x0 + band, y0 + 1, x0 + 2 * band, y1 - 1, shade);
        } else {
            let band = (h / 5).max(1);
            canvas.fill_rect(x0 + 1, y0 + band, x1 - 1, y0 + 2 * band, shade);
        }
        boxes.push(BoundingBox::from_corners(
            class_id,
            x0 as f64 / n as f64,
            y0 as f64 / n as f64,
            x1 as f64 / n as f64,
            y1 as f64 / n as f64,
        ));
    }

    Ok(LabeledImage {
        image: Tensor::new(vec![3, n, n], canvas.data)?,
        boxes,
        source: format!("synth_{seed:08}"),
    })
}

/// `count` scenes with seeds `seed, seed + 1, ...`.
pub fn synth_dataset(count: usize, seed: u64, cfg: &SynthConfig) -> Result<Vec<LabeledImage>> {
    (0..count as u64)
        .map(|i| synth_scene(seed.wrapping_add(i), cfg))
        .collect()
}
