use crate::error::{Error, Result};
use crate::kv::KeyValues;

/// Shape of the micro grid detector.
///
/// The backbone is a stack of 3×3 conv + leaky-ReLU blocks; the first
/// `log2(stride)` blocks downsample by two, the rest keep resolution. A 1×1
/// head emits `num_anchors · (5 + num_classes)` channels per grid cell.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub input_size: usize,
    pub grid_size: usize,
    /// Anchor extents `(w, h)` as fractions of the image.
    pub anchors: Vec<(f64, f64)>,
    pub num_classes: usize,
    pub conv_channels: Vec<usize>,
    pub coord_weight: f64,
    pub noobj_weight: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            input_size: 104,
            grid_size: 13,
            anchors: vec![(0.24, 0.15), (0.15, 0.24)],
            num_classes: 4,
            conv_channels: vec![16, 32, 32, 32, 32],
            coord_weight: 5.0,
            noobj_weight: 0.5,
        }
    }
}

impl DetectorConfig {
    /// Single-class config sized for patch placements rather than vehicles.
    pub fn patch_detector(num_classes: usize) -> Self {
        Self {
            anchors: vec![(0.07, 0.07), (0.12, 0.12)],
            num_classes,
            ..Self::default()
        }
    }

    pub fn num_anchors(&self) -> usize {
        self.anchors.len()
    }

    pub fn stride(&self) -> usize {
        self.input_size / self.grid_size.max(1)
    }

    /// Channels per anchor: tx, ty, tw, th, objectness, then class logits.
    pub fn channels_per_anchor(&self) -> usize {
        5 + self.num_classes
    }

    pub fn num_downsamples(&self) -> usize {
        self.stride().trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_size == 0 || self.input_size % self.grid_size != 0 {
            return Err(Error::Parameter(format!(
                "input size {} is not divisible by grid size {}",
                self.input_size, self.grid_size
            )));
        }
        let stride = self.stride();
        if !stride.is_power_of_two() {
            return Err(Error::Parameter(format!("grid stride {stride} is not a power of two")));
        }
        if self.num_downsamples() > self.conv_channels.len() {
            return Err(Error::Parameter(format!(
                "stride {stride} needs {} downsampling blocks, only {} configured",
                self.num_downsamples(),
                self.conv_channels.len()
            )));
        }
        if self.anchors.is_empty() {
            return Err(Error::Parameter("at least one anchor is required".into()));
        }
        if self
            .anchors
            .iter()
            .any(|&(w, h)| !(w > 0.0 && h > 0.0 && w <= 1.0 && h <= 1.0))
        {
            return Err(Error::Parameter("anchor extents must lie in (0,1]".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Parameter("num_classes must be >= 1".into()));
        }
        if self.conv_channels.contains(&0) {
            return Err(Error::Parameter("conv channel counts must be positive".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("input_size", self.input_size);
        kv.set("grid_size", self.grid_size);
        kv.set(
            "anchors",
            self.anchors
                .iter()
                .map(|(w, h)| format!("{w}x{h}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        kv.set("num_classes", self.num_classes);
        kv.set(
            "conv_channels",
            self.conv_channels
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv.set("coord_weight", self.coord_weight);
        kv.set("noobj_weight", self.noobj_weight);
        kv
    }

    /// Missing keys take their defaults.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let parse_list = |key: &str| -> Result<Option<Vec<String>>> {
            Ok(kv
                .get_str(key)
                .map(|s| s.split(',').map(|p| p.trim().to_string()).collect()))
        };
        let anchors = match parse_list("anchors")? {
            None => d.anchors,
            Some(items) => items
                .iter()
                .map(|it| {
                    let (w, h) = it.split_once('x').ok_or_else(|| {
                        Error::Parameter(format!("anchor `{it}` is not `WxH`"))
                    })?;
                    let p = |s: &str| {
                        s.parse::<f64>()
                            .map_err(|e| Error::Parameter(format!("anchor `{it}`: {e}")))
                    };
                    Ok((p(w)?, p(h)?))
                })
                .collect::<Result<_>>()?,
        };
        let conv_channels = match parse_list("conv_channels")? {
            None => d.conv_channels,
            Some(items) => items
                .iter()
                .map(|s| {
                    s.parse::<usize>()
                        .map_err(|e| Error::Parameter(format!("conv channel `{s}`: {e}")))
                })
                .collect::<Result<_>>()?,
        };
        let cfg = Self {
            input_size: kv.get("input_size")?.unwrap_or(d.input_size),
            grid_size: kv.get("grid_size")?.unwrap_or(d.grid_size),
            anchors,
            num_classes: kv.get("num_classes")?.unwrap_or(d.num_classes),
            conv_channels,
            coord_weight: kv.get("coord_weight")?.unwrap_or(d.coord_weight),
            noobj_weight: kv.get("noobj_weight")?.unwrap_or(d.noobj_weight),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text identifying the architecture; stored with the weights.
    pub fn fingerprint(&self) -> String {
        self.to_kv().to_text()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_with_three_downsamples() {
        let c = DetectorConfig::default();
        c.validate().unwrap();
        assert_eq!(c.stride(), 8);
        assert_eq!(c.num_downsamples(), 3);
        assert_eq!(c.channels_per_anchor(), 9);
    }

    #[test]
    fn kv_round_trip() {
        let c = DetectorConfig::patch_detector(10);
        assert_eq!(DetectorConfig::from_kv(&c.to_kv()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_geometry() {
        let c = DetectorConfig {
            input_size: 100,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = DetectorConfig {
            num_classes: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
