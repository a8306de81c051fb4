//! Micro single-stage grid detector: conv backbone, YOLO-style grid decoding,
//! per-class NMS, supervised loss and a momentum-SGD training loop.

mod config;
mod decode;
pub mod io;
mod loss;
mod model;
mod train;

pub use config::DetectorConfig;
pub use decode::{best_anchor, decode, detect, encode, nms, shape_iou, Detection, Encoded};
pub use loss::{detection_loss, LossTerms};
pub use model::{
    forward_graph, DetectorWeights, GridPrediction, CH_CLS, CH_OBJ, CH_TH, CH_TW, CH_TX, CH_TY,
};
pub use train::{flip_sample, image_gradients, train_detector, train_from, TrainHyper, TrainOutcome};

use crate::dataset::LabeledImage;
use crate::error::Result;

/// Thresholds used when turning grid output into final detections.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectParams {
    pub conf_thresh: f64,
    pub iou_thresh: f64,
}

impl Default for DetectParams {
    fn default() -> Self {
        Self {
            conf_thresh: 0.3,
            iou_thresh: 0.45,
        }
    }
}

/// Runs the detector over every image and returns post-NMS detections.
pub fn predict(
    weights: &DetectorWeights,
    images: &[LabeledImage],
    params: DetectParams,
) -> Result<Vec<Vec<Detection>>> {
    images
        .iter()
        .map(|s| {
            let pred = weights.forward(&s.image)?;
            Ok(detect(&pred, params.conf_thresh, params.iou_thresh, &weights.config))
        })
        .collect()
}
