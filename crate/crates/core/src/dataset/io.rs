//! On-disk layout:
//!
//! ```text
//! <root>/images/<stem>.png
//! <root>/labels/<stem>.txt      one `class_id cx cy w h` line per box
//! <root>/dataset.json           class names + split -> stems
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::LabeledImage;
use crate::bbox::{BoundingBox, ClassMap};
use crate::error::{Error, Result};
use crate::imageio;

pub const MANIFEST: &str = "dataset.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub splits: BTreeMap<String, Vec<String>>,
}

impl DatasetManifest {
    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::input(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::input(&path, e))
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        std::fs::create_dir_all(root)?;
        let text = serde_json::to_string_pretty(self).expect("serializable") + "\n";
        std::fs::write(root.join(MANIFEST), text)?;
        Ok(())
    }

    pub fn class_map(&self) -> Result<ClassMap> {
        ClassMap::new(self.classes.iter().cloned())
    }
}

pub fn write_labels(boxes: &[BoundingBox], path: &Path) -> Result<()> {
    let mut text = String::new();
    for b in boxes {
        text.push_str(&b.to_label_line());
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<Vec<BoundingBox>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::input(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| BoundingBox::parse_label_line(l, i + 1).map_err(|e| Error::input(path, e)))
        .collect()
}

/// Writes samples under `root` and records them as `split` in the manifest,
/// creating or extending it.
pub fn save_split(root: &Path, classes: &ClassMap, split: &str, data: &[LabeledImage]) -> Result<()> {
    std::fs::create_dir_all(root.join("images"))?;
    std::fs::create_dir_all(root.join("labels"))?;
    let mut manifest = if root.join(MANIFEST).exists() {
        DatasetManifest::read(root)?
    } else {
        DatasetManifest::default()
    };
    manifest.classes = classes.names().to_vec();
    let mut stems = Vec::with_capacity(data.len());
    for s in data {
        imageio::write_png(&s.image, &root.join("images").join(format!("{}.png", s.source)))?;
        write_labels(&s.boxes, &root.join("labels").join(format!("{}.txt", s.source)))?;
        stems.push(s.source.clone());
    }
    manifest.splits.insert(split.to_string(), stems);
    manifest.write(root)
}

/// Loads one split, or every split in manifest order when `split` is `None`.
pub fn load_split(root: &Path, split: Option<&str>) -> Result<(ClassMap, Vec<LabeledImage>)> {
    let manifest = DatasetManifest::read(root)?;
    let stems: Vec<&String> = match split {
        Some(name) => manifest
            .splits
            .get(name)
            .ok_or_else(|| Error::input(root.join(MANIFEST), format!("no split `{name}`")))?
            .iter()
            .collect(),
        None => manifest.splits.values().flatten().collect(),
    };
    let data = stems
        .into_iter()
        .map(|stem| {
            Ok(LabeledImage {
                image: imageio::read_png(&root.join("images").join(format!("{stem}.png")))?,
                boxes: read_labels(&root.join("labels").join(format!("{stem}.txt")))?,
                source: stem.clone(),
            })
        })
        .collect::<Result<_>>()?;
    Ok((manifest.class_map()?, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    #[test]
    fn split_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = vec![LabeledImage {
            image: Tensor::from_fn(vec![3, 8, 8], |i| (i % 255) as f32 / 255.0),
            boxes: vec![BoundingBox::new(2, 0.5, 0.25, 0.125, 0.5)],
            source: "a".into(),
        }];
        save_split(dir.path(), &ClassMap::vehicles(), "train", &data).unwrap();
        let (classes, back) = load_split(dir.path(), Some("train")).unwrap();
        assert_eq!(classes, ClassMap::vehicles());
        assert_eq!(back, data);
        assert!(load_split(dir.path(), Some("test")).is_err());
    }

    #[test]
    fn bad_label_line_reports_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.txt");
        std::fs::write(&p, "0 0.5 0.5 0.1 0.1\n0 oops\n").unwrap();
        let msg = read_labels(&p).unwrap_err().to_string();
        assert!(msg.contains("x.txt") && msg.contains("line 2"), "{msg}");
    }
}
