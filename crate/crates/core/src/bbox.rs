use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class-labeled box in normalized image coordinates (center + extent).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

impl BoundingBox {
    pub fn new(class_id: usize, cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            class_id,
            cx,
            cy,
            w,
            h,
            confidence: None,
        }
    }

    /// Builds a box from normalized corners.
    pub fn from_corners(class_id: usize, x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self::new(class_id, (x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    pub fn with_confidence(mut self, c: f64) -> Self {
        self.confidence = Some(c);
        self
    }

    /// `(x0, y0, x1, y1)` in normalized coordinates.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        [self.cx, self.cy, self.w, self.h]
            .iter()
            .all(|v| v.is_finite() && (0.0..=1.0).contains(v))
            && self.w > 0.0
            && self.h > 0.0
    }

    /// Intersection over union; 0 when the union is empty.
    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let (ax0, ay0, ax1, ay1) = self.corners();
        let (bx0, by0, bx1, by1) = other.corners();
        let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
        let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
        let inter = iw * ih;
        // Areas from the same corners as the intersection, so identical boxes give exactly 1.
        let area_a = (ax1 - ax0) * (ay1 - ay0);
        let area_b = (bx1 - bx0) * (by1 - by0);
        let union = area_a + area_b - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Width and height in pixels for an image of `size = (height, width)`.
    pub fn pixel_extent(&self, size: (usize, usize)) -> (f64, f64) {
        (self.w * size.1 as f64, self.h * size.0 as f64)
    }

    /// One annotation line: `class_id cx cy w h`.
    pub fn to_label_line(&self) -> String {
        format!(
            "{} {:.8} {:.8} {:.8} {:.8}",
            self.class_id, self.cx, self.cy, self.w, self.h
        )
    }

    pub fn parse_label_line(line: &str, line_no: usize) -> Result<Self> {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 && fields.len() != 6 {
            return Err(Error::Parse {
                line: line_no,
                detail: format!("expected `class cx cy w h`, got {} fields", fields.len()),
            });
        }
        let num = |s: &str| {
            s.parse::<f64>().map_err(|e| Error::Parse {
                line: line_no,
                detail: format!("bad number `{s}`: {e}"),
            })
        };
        let class_id = fields[0].parse::<usize>().map_err(|e| Error::Parse {
            line: line_no,
            detail: format!("bad class id `{}`: {e}", fields[0]),
        })?;
        let mut b = Self::new(
            class_id,
            num(fields[1])?,
            num(fields[2])?,
            num(fields[3])?,
            num(fields[4])?,
        );
        if let Some(c) = fields.get(5) {
            b.confidence = Some(num(c)?);
        }
        Ok(b)
    }
}

/// Ordered, unique class names; a class id is an index into this list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMap {
    names: Vec<String>,
}

impl Default for ClassMap {
    fn default() -> Self {
        Self::vehicles()
    }
}

impl ClassMap {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::Parameter(format!("duplicate class name `{n}`")));
            }
        }
        Ok(Self { names })
    }

    /// bus, car, truck, van.
    pub fn vehicles() -> Self {
        Self::new(["bus", "car", "truck", "van"]).expect("unique names")
    }

    pub fn single(name: &str) -> Self {
        Self::new([name]).expect("unique names")
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }
}
