use std::fmt::Write as _;

use super::LabeledImage;
use crate::bbox::ClassMap;

/// Summary statistics of a labeled dataset. Box extent is the longer side of
/// the box in pixels. Medians and spreads are `None` when there is nothing
/// to summarize.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetStats {
    pub images: usize,
    pub labels: usize,
    pub per_class: Vec<usize>,
    pub labels_per_image_median: Option<f64>,
    pub labels_per_image_max: usize,
    pub extent_median_px: Option<f64>,
    pub extent_std_px: Option<f64>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// Population standard deviation.
pub fn std_dev(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    Some((values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt())
}

pub fn stats(data: &[LabeledImage], num_classes: usize) -> DatasetStats {
    let mut per_class = vec![0; num_classes];
    let mut per_image = Vec::with_capacity(data.len());
    let mut extents = Vec::new();
    for s in data {
        per_image.push(s.boxes.len() as f64);
        let sh = s.image.shape();
        for b in &s.boxes {
            if b.class_id >= per_class.len() {
                per_class.resize(b.class_id + 1, 0);
            }
            per_class[b.class_id] += 1;
            let (w, h) = b.pixel_extent((sh[1], sh[2]));
            extents.push(w.max(h));
        }
    }
    DatasetStats {
        images: data.len(),
        labels: extents.len(),
        per_class,
        labels_per_image_median: median(&per_image),
        labels_per_image_max: per_image.iter().map(|&v| v as usize).max().unwrap_or(0),
        extent_median_px: median(&extents),
        extent_std_px: std_dev(&extents),
    }
}

impl DatasetStats {
    /// `metric,value` rows; undefined values are written as `undefined`.
    pub fn to_csv(&self, classes: &ClassMap) -> String {
        let opt = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x}"));
        let mut s = String::from("metric,value\n");
        let _ = writeln!(s, "images,{}", self.images);
        let _ = writeln!(s, "labels,{}", self.labels);
        for (i, c) in self.per_class.iter().enumerate() {
            let name = classes
                .name(i)
                .map_or_else(|| format!("class_{i}"), str::to_string);
            let _ = writeln!(s, "count_{name},{c}");
        }
        let _ = writeln!(s, "labels_per_image_median,{}", opt(self.labels_per_image_median));
        let _ = writeln!(s, "labels_per_image_max,{}", self.labels_per_image_max);
        let _ = writeln!(s, "extent_median_px,{}", opt(self.extent_median_px));
        let _ = writeln!(s, "extent_std_px,{}", opt(self.extent_std_px));
        s
    }
}
