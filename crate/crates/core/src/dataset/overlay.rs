use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::LabeledImage;
use crate::error::{Error, Result};
use crate::patcher::{render_placements, sample_jitter, ApplyConfig, Patch};
use crate::diffcore::Graph;

/// How patch placements are labeled in the derived dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelMode {
    /// Every placement is class 0 ("patch").
    SingleClass,
    /// Placement labeled by the index of the patch used.
    PerPatchClass,
}

impl std::str::FromStr for LabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single_class" | "single" => Ok(Self::SingleClass),
            "per_patch_class" | "per_patch" => Ok(Self::PerPatchClass),
            other => Err(Error::Parameter(format!("unknown label mode `{other}`"))),
        }
    }
}

/// Puts one randomly chosen patch on every labeled object and relabels the
/// image with the placement squares, for training a detector that finds
/// patches. Objects of every class are patched.
pub fn overlay_patch_dataset(
    data: &[LabeledImage],
    patches: &[Patch],
    cfg: &ApplyConfig,
    label_mode: LabelMode,
) -> Result<Vec<LabeledImage>> {
    if patches.is_empty() {
        return Err(Error::Usage("overlay needs at least one patch".into()));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(data.len());
    for sample in data {
        let s = sample.image.shape();
        let size = (s[1], s[2]);
        let mut g = Graph::<f32>::new();
        let mut img = g.constant(sample.image.clone());
        let mut boxes = Vec::new();
        let patch_nodes: Vec<_> = patches.iter().map(|p| g.constant(p.pixels.clone())).collect();
        for (i, b) in sample.boxes.iter().enumerate() {
            let which = rng.gen_range(0..patches.len());
            let single = [*b];
            let targets: BTreeSet<usize> = [b.class_id].into();
            let mut log = sample_jitter(&single, cfg, &targets, size, &mut rng);
            let Some(pl) = log.placements.first_mut() else {
                continue;
            };
            pl.box_index = i;
            let class_id = match label_mode {
                LabelMode::SingleClass => 0,
                LabelMode::PerPatchClass => which,
            };
            boxes.push(pl.bbox(size, class_id));
            img = render_placements(&mut g, img, patch_nodes[which], &log, cfg.alpha)?;
        }
        out.push(LabeledImage {
            image: g.value(img).clone(),
            boxes,
            source: format!("{}_patched", sample.source),
        });
    }
    Ok(out)
}
