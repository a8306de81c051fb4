use std::collections::BTreeMap;

use super::config::DetectorConfig;
use super::decode::encode;
use super::model::{CH_CLS, CH_OBJ, CH_TH, CH_TW, CH_TX, CH_TY};
use crate::bbox::BoundingBox;
use crate::diffcore::{Graph, NodeId, Real, Tensor};
use crate::error::{Error, Result};

/// Component nodes of the supervised detection loss.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub coord: NodeId,
    pub objectness: NodeId,
    pub class: NodeId,
    pub total: NodeId,
}

struct Positive {
    anchor_index: usize,
    frac: (f64, f64),
    twh: (f64, f64),
    class_id: usize,
}

fn assign(truth: &[BoundingBox], cfg: &DetectorConfig) -> Vec<Positive> {
    // Later boxes claim a shared cell/anchor slot in label order.
    let mut slots: BTreeMap<usize, Positive> = BTreeMap::new();
    for b in truth {
        let e = encode(b, cfg);
        let anchor_index = (e.row * cfg.grid_size + e.col) * cfg.num_anchors() + e.anchor;
        slots.insert(
            anchor_index,
            Positive {
                anchor_index,
                frac: e.frac,
                twh: (e.t[2], e.t[3]),
                class_id: b.class_id,
            },
        );
    }
    slots.into_values().collect()
}

/// Supervised loss on one image's `[S, S, B, 5 + K]` prediction node:
///
/// * coordinates: `coord_weight · Σ (σ(tx) − fx)² + (σ(ty) − fy)² + (tw − tw*)² + (th − th*)²`
///   over assigned anchors;
/// * objectness: binary cross-entropy on every anchor, positives weighted 1,
///   negatives weighted `noobj_weight`;
/// * class: cross-entropy at assigned anchors.
///
/// Each truth box is assigned to the cell holding its center and the anchor
/// with best shape IOU.
pub fn detection_loss<T: Real>(
    g: &mut Graph<T>,
    pred: NodeId,
    truth: &[BoundingBox],
    cfg: &DetectorConfig,
) -> Result<LossTerms> {
    let (s, b, c) = (cfg.grid_size, cfg.num_anchors(), cfg.channels_per_anchor());
    if g.shape(pred) != [s, s, b, c] {
        return Err(Error::dim(
            "prediction",
            format!("expected {:?}, got {:?}", [s, s, b, c], g.shape(pred)),
        ));
    }
    if let Some(bad) = truth.iter().find(|t| t.class_id >= cfg.num_classes) {
        return Err(Error::Parameter(format!(
            "truth class {} outside {} configured classes",
            bad.class_id, cfg.num_classes
        )));
    }
    let n_anchor = s * s * b;
    let positives = assign(truth, cfg);
    let t = |v: f64| T::from_f64_lossy(v);
    let zero = g.constant(Tensor::scalar(T::zero()));

    let (coord, class) = if positives.is_empty() {
        (zero, zero)
    } else {
        let n = positives.len();
        let xy_idx = positives
            .iter()
            .flat_map(|p| [p.anchor_index * c + CH_TX, p.anchor_index * c + CH_TY])
            .collect();
        let xy = g.gather(pred, xy_idx)?;
        let xy = g.sigmoid(xy);
        let xy_t = g.constant(Tensor::new(
            vec![2 * n],
            positives.iter().flat_map(|p| [t(p.frac.0), t(p.frac.1)]).collect(),
        )?);
        let dxy = g.sub(xy, xy_t)?;
        let dxy = g.square(dxy);
        let wh_idx = positives
            .iter()
            .flat_map(|p| [p.anchor_index * c + CH_TW, p.anchor_index * c + CH_TH])
            .collect();
        let wh = g.gather(pred, wh_idx)?;
        let wh_t = g.constant(Tensor::new(
            vec![2 * n],
            positives.iter().flat_map(|p| [t(p.twh.0), t(p.twh.1)]).collect(),
        )?);
        let dwh = g.sub(wh, wh_t)?;
        let dwh = g.square(dwh);
        let sq = g.add(dxy, dwh)?;
        let sq = g.sum(sq);
        let coord = g.scale(sq, t(cfg.coord_weight));

        let k = cfg.num_classes;
        let cls_idx = positives
            .iter()
            .flat_map(|p| (0..k).map(move |j| p.anchor_index * c + CH_CLS + j))
            .collect();
        let logits = g.gather(pred, cls_idx)?;
        let logits = g.reshape(logits, vec![n, k])?;
        let logp = g.log_softmax_last(logits)?;
        let picked = g.gather(logp, positives.iter().enumerate().map(|(i, p)| i * k + p.class_id).collect())?;
        let nll = g.sum(picked);
        (coord, g.scale(nll, -T::one()))
    };

    // BCE(z, y) = softplus(z) − y·z, weighted per anchor.
    let mut weight = vec![t(cfg.noobj_weight); n_anchor];
    let mut wy = vec![T::zero(); n_anchor];
    for p in &positives {
        weight[p.anchor_index] = T::one();
        wy[p.anchor_index] = T::one();
    }
    let z = g.gather(pred, (0..n_anchor).map(|a| a * c + CH_OBJ).collect())?;
    let sp = g.softplus(z);
    let w = g.constant(Tensor::new(vec![n_anchor], weight)?);
    let wsp = g.mul(sp, w)?;
    let wsp = g.sum(wsp);
    let wy = g.constant(Tensor::new(vec![n_anchor], wy)?);
    let yz = g.mul(z, wy)?;
    let yz = g.sum(yz);
    let objectness = g.sub(wsp, yz)?;

    let total = g.add(coord, objectness)?;
    let total = g.add(total, class)?;
    Ok(LossTerms {
        coord,
        objectness,
        class,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::model::GridPrediction;

    fn filled(cfg: &DetectorConfig, obj: f32) -> GridPrediction {
        let c = cfg.channels_per_anchor();
        let s = cfg.grid_size;
        let mut raw = Tensor::zeros(vec![s, s, cfg.num_anchors(), c]);
        for (i, v) in raw.data_mut().iter_mut().enumerate() {
            if i % c == CH_OBJ {
                *v = obj;
            }
        }
        GridPrediction { raw }
    }

    #[test]
    fn empty_truth_with_suppressed_grid_is_near_zero() {
        let cfg = DetectorConfig::default();
        let mut g = Graph::<f64>::new();
        let p = g.constant(filled(&cfg, -20.0).raw.cast());
        let l = detection_loss(&mut g, p, &[], &cfg).unwrap();
        assert!(g.value(l.total).item() < 0.01);
    }

    #[test]
    fn perfect_encoding_zeroes_coord_and_class_terms() {
        let cfg = DetectorConfig::default();
        let truth = [
            BoundingBox::new(1, 0.31, 0.62, 0.2, 0.1),
            BoundingBox::new(3, 0.77, 0.21, 0.12, 0.22),
        ];
        let mut p = filled(&cfg, -20.0);
        for b in &truth {
            let e = encode(b, &cfg);
            for (ch, v) in e.t.iter().enumerate() {
                let i = p.offset(e.row, e.col, e.anchor, ch);
                p.raw.data_mut()[i] = *v as f32;
            }
            let i = p.offset(e.row, e.col, e.anchor, CH_OBJ);
            p.raw.data_mut()[i] = 20.0;
            for j in 0..cfg.num_classes {
                let i = p.offset(e.row, e.col, e.anchor, CH_CLS + j);
                p.raw.data_mut()[i] = if j == b.class_id { 30.0 } else { -30.0 };
            }
        }
        let mut g = Graph::<f64>::new();
        let node = g.constant(p.raw.cast());
        let l = detection_loss(&mut g, node, &truth, &cfg).unwrap();
        assert!(g.value(l.coord).item() < 1e-6, "{}", g.value(l.coord).item());
        assert!(g.value(l.class).item() < 1e-6);
        assert!(g.value(l.objectness).item() < 1e-3);
    }

    #[test]
    fn rejects_out_of_range_class() {
        let cfg = DetectorConfig::default();
        let mut g = Graph::<f32>::new();
        let p = g.constant(filled(&cfg, 0.0).raw);
        assert!(detection_loss(&mut g, p, &[BoundingBox::new(9, 0.5, 0.5, 0.1, 0.1)], &cfg).is_err());
    }
}
