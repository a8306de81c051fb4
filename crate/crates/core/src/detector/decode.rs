use std::cmp::Ordering;

use super::config::DetectorConfig;
use super::model::{GridPrediction, CH_CLS, CH_OBJ, CH_TH, CH_TW, CH_TX, CH_TY};
use crate::bbox::BoundingBox;
use crate::diffcore::sigmoid;

/// A decoded, scored box. `bbox.confidence` mirrors `score`.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub objectness: f64,
    pub class_id: usize,
    pub class_conf: f64,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: BoundingBox, objectness: f64, class_conf: f64) -> Self {
        let score = objectness * class_conf;
        Self {
            bbox: bbox.with_confidence(score),
            objectness,
            class_id: bbox.class_id,
            class_conf,
            score,
        }
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Turns raw grid logits into detections with `score >= conf_thresh`.
pub fn decode(pred: &GridPrediction, conf_thresh: f64, cfg: &DetectorConfig) -> Vec<Detection> {
    let s = pred.grid_size();
    let k = pred.channels() - CH_CLS;
    let mut out = Vec::new();
    let mut logits = vec![0.0; k];
    for row in 0..s {
        for col in 0..s {
            for (b, &(aw, ah)) in cfg.anchors.iter().enumerate() {
                let at = |ch| pred.get(row, col, b, ch) as f64;
                let obj = sigmoid(at(CH_OBJ));
                if obj < conf_thresh {
                    continue;
                }
                for (j, l) in logits.iter_mut().enumerate() {
                    *l = at(CH_CLS + j);
                }
                let probs = softmax(&logits);
                let (class_id, class_conf) = probs
                    .iter()
                    .copied()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, p)| {
                        if p > best.1 {
                            (i, p)
                        } else {
                            best
                        }
                    });
                if obj * class_conf < conf_thresh {
                    continue;
                }
                let cx = (col as f64 + sigmoid(at(CH_TX))) / s as f64;
                let cy = (row as f64 + sigmoid(at(CH_TY))) / s as f64;
                let w = (aw * at(CH_TW).exp()).clamp(0.0, 1.0);
                let h = (ah * at(CH_TH).exp()).clamp(0.0, 1.0);
                out.push(Detection::new(
                    BoundingBox::new(class_id, cx, cy, w, h),
                    obj,
                    class_conf,
                ));
            }
        }
    }
    out
}

/// Grid placement of a ground-truth box: responsible cell, anchor, and the
/// regression targets `(tx, ty, tw, th)` whose decode reproduces the box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Encoded {
    pub row: usize,
    pub col: usize,
    pub anchor: usize,
    /// Center offsets inside the cell, in `(0, 1)`.
    pub frac: (f64, f64),
    pub t: [f64; 4],
}

const FRAC_EPS: f64 = 1e-9;

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// IOU of two boxes sharing a center.
pub fn shape_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = a.0.min(b.0) * a.1.min(b.1);
    inter / (a.0 * a.1 + b.0 * b.1 - inter)
}

/// The anchor whose extent best overlaps the box's (lowest index on ties).
pub fn best_anchor(bbox: &BoundingBox, cfg: &DetectorConfig) -> usize {
    cfg.anchors
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &a)| {
            let v = shape_iou((bbox.w, bbox.h), a);
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        })
        .0
}

pub fn encode(bbox: &BoundingBox, cfg: &DetectorConfig) -> Encoded {
    let s = cfg.grid_size as f64;
    let gx = bbox.cx * s;
    let gy = bbox.cy * s;
    let col = (gx.floor().max(0.0) as usize).min(cfg.grid_size - 1);
    let row = (gy.floor().max(0.0) as usize).min(cfg.grid_size - 1);
    let fx = (gx - col as f64).clamp(FRAC_EPS, 1.0 - FRAC_EPS);
    let fy = (gy - row as f64).clamp(FRAC_EPS, 1.0 - FRAC_EPS);
    let anchor = best_anchor(bbox, cfg);
    let (aw, ah) = cfg.anchors[anchor];
    Encoded {
        row,
        col,
        anchor,
        frac: (fx, fy),
        t: [logit(fx), logit(fy), (bbox.w / aw).ln(), (bbox.h / ah).ln()],
    }
}

/// Greedy per-class suppression in descending score order (ties: lower input
/// index first). A box is dropped when its IOU with an already-kept box of the
/// same class reaches `iou_thresh`.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = kept.iter().any(|&j| {
            dets[j].class_id == dets[i].class_id && dets[j].bbox.iou(&dets[i].bbox) >= iou_thresh
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i].clone()).collect()
}

/// Decode followed by NMS.
pub fn detect(
    pred: &GridPrediction,
    conf_thresh: f64,
    iou_thresh: f64,
    cfg: &DetectorConfig,
) -> Vec<Detection> {
    nms(&decode(pred, conf_thresh, cfg), iou_thresh)
}
