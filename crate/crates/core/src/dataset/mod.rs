//! Dataset preparation: synthetic scenes, tiling, class filtering, patch
//! overlays for the patch detector, and summary statistics.

pub mod io;
mod overlay;
mod stats;
mod synth;
mod tile;

pub use overlay::{overlay_patch_dataset, LabelMode};
pub use stats::{median, stats, std_dev, DatasetStats};
pub use synth::{class_prior, synth_dataset, synth_scene, ClassPrior, SynthConfig};
pub use tile::{tile, Tile, MIN_RETAINED_AREA};

use crate::bbox::{BoundingBox, ClassMap};
use crate::diffcore::Tensor;

/// An image with its annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: Tensor<f32>,
    pub boxes: Vec<BoundingBox>,
    pub source: String,
}

impl LabeledImage {
    pub fn size(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s[1], s[2])
    }
}

/// Drops boxes whose class (named through `source`) is not in `keep` and
/// renumbers the rest to `keep`'s ordering. Images are always retained.
pub fn filter_classes(data: &[LabeledImage], source: &ClassMap, keep: &ClassMap) -> Vec<LabeledImage> {
    let remap: Vec<Option<usize>> = (0..source.len())
        .map(|i| source.name(i).and_then(|n| keep.id_of(n)))
        .collect();
    data.iter()
        .map(|s| LabeledImage {
            image: s.image.clone(),
            boxes: s
                .boxes
                .iter()
                .filter_map(|b| {
                    remap.get(b.class_id).copied().flatten().map(|id| {
                        let mut b = *b;
                        b.class_id = id;
                        b
                    })
                })
                .collect(),
            source: s.source.clone(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(ids: &[usize]) -> LabeledImage {
        LabeledImage {
            image: Tensor::zeros(vec![3, 4, 4]),
            boxes: ids
                .iter()
                .map(|&c| BoundingBox::new(c, 0.5, 0.5, 0.1, 0.1))
                .collect(),
            source: "s".into(),
        }
    }

    #[test]
    fn keep_everything_is_identity() {
        let m = ClassMap::vehicles();
        let d = vec![sample(&[0, 3, 1])];
        assert_eq!(filter_classes(&d, &m, &m), d);
    }

    #[test]
    fn empty_keep_clears_labels_but_keeps_images() {
        let m = ClassMap::vehicles();
        let out = filter_classes(&[sample(&[0, 1])], &m, &ClassMap::new(Vec::<String>::new()).unwrap());
        assert_eq!(out.len(), 1);
        assert!(out[0].boxes.is_empty());
    }

    #[test]
    fn remaps_to_keep_order() {
        let src = ClassMap::new(["pedestrian", "car", "van", "bus"]).unwrap();
        let out = filter_classes(&[sample(&[0, 1, 2, 3])], &src, &ClassMap::vehicles());
        let ids: Vec<usize> = out[0].boxes.iter().map(|b| b.class_id).collect();
        assert_eq!(ids, vec![1, 3, 0]);
    }
}
