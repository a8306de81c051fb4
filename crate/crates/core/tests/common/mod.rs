//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use camo_core::bbox::BoundingBox;
use camo_core::detector::{forward_graph, Detection, DetectorConfig, DetectorWeights};
use camo_core::diffcore::{grad_check, Activation, Graph, NodeId, Tensor};
use camo_core::evaluator::{bootstrap_sigma, f1_report, match_detections, pearson, EvalParams};
use camo_core::patch_trainer::{adversarial_loss, LossKind, Reduction};
use camo_core::patcher::{render_placements, sample_jitter, ApplyConfig};
use camo_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Direct seven-loop cross-correlation.
pub fn naive_conv(
    x: &[f64],
    xs: [usize; 4],
    k: &[f64],
    ks: [usize; 4],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, w] = xs;
    let [f, _, kh, kw] = ks;
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * f * ho * wo];
    for b in 0..n {
        for o in 0..f {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x[((b * c + ci) * h + iy as usize) * w + ix as usize]
                                    * k[((o * c + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((b * f + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (out, [n, f, ho, wo])
}

/// `sum(w ⊙ x)` with a fixed random `w`, so every output element carries a
/// distinct upstream gradient.
pub fn weighted_sum(g: &mut Graph<f64>, x: NodeId, seed: u64) -> Result<NodeId> {
    let mut r = rng(seed);
    let w = rand_tensor(&mut r, g.shape(x), -1.0, 1.0);
    let w = g.constant(w);
    let y = g.mul(x, w)?;
    Ok(g.sum(y))
}

pub const GRAD_EPS: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-4;
/// Larger step for the deep chain: patch pixels reach some anchors only
/// through small bilinear weights, and their gradients sit near the
/// round-off floor of a 1e-6 step.
pub const COMPOSED_EPS: f64 = 1e-4;

/// Tiny detector small enough for per-element finite differences.
pub fn tiny_detector_config() -> DetectorConfig {
    DetectorConfig {
        input_size: 16,
        grid_size: 4,
        anchors: vec![(0.3, 0.3), (0.5, 0.25)],
        num_classes: 2,
        conv_channels: vec![4, 4, 4],
        ..DetectorConfig::default()
    }
}

/// Random weights with nonzero biases so leaky-ReLU inputs stay away from 0.
pub fn tiny_detector(seed: u64) -> DetectorWeights {
    let mut w = DetectorWeights::init(&tiny_detector_config(), seed).unwrap();
    let mut r = rng(seed ^ 0xb1a5);
    for (name, t) in &mut w.tensors {
        if name.ends_with("bias") {
            t.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-0.3..0.3));
        }
    }
    w
}

/// Maximum relative error of each differentiable op against central
/// differences, in f64.
pub fn op_grad_checks() -> Vec<(&'static str, f64)> {
    let mut r = rng(42);
    let mut out = Vec::new();
    let mut check = |name: &'static str, input: Tensor<f64>, f: &dyn Fn(&mut Graph<f64>, NodeId) -> Result<NodeId>| {
        let gc = grad_check(f, &input, GRAD_EPS).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(gc.checked > 0, "{name}: no element was compared");
        out.push((name, gc.max_rel_err));
    };

    let x4 = rand_tensor(&mut r, &[2, 3, 5, 5], -1.0, 1.0);
    let k4 = rand_tensor(&mut r, &[4, 3, 3, 3], -1.0, 1.0);
    {
        let k = k4.clone();
        check("conv2d/input", x4.clone(), &move |g, x| {
            let kn = g.constant(k.clone());
            let y = g.conv2d(x, kn, 2, 1)?;
            weighted_sum(g, y, 1)
        });
    }
    {
        let xi = x4.clone();
        check("conv2d/kernel", k4.clone(), &move |g, k| {
            let xn = g.constant(xi.clone());
            let y = g.conv2d(xn, k, 1, 1)?;
            weighted_sum(g, y, 2)
        });
    }
    let bias = rand_tensor(&mut r, &[3], -1.0, 1.0);
    {
        let b = bias.clone();
        check("bias_add/input", x4.clone(), &move |g, x| {
            let bn = g.constant(b.clone());
            let y = g.bias_add(x, bn)?;
            weighted_sum(g, y, 3)
        });
        let xi = x4.clone();
        check("bias_add/bias", bias, &move |g, b| {
            let xn = g.constant(xi.clone());
            let y = g.bias_add(xn, b)?;
            weighted_sum(g, y, 4)
        });
    }

    // Elementwise inputs kept away from kinks and the sqrt singularity.
    let away = Tensor::from_fn(vec![3, 4], |i| {
        let v = r.gen_range(0.05..1.5);
        if i % 2 == 0 {
            v
        } else {
            -v
        }
    });
    let positive = rand_tensor(&mut r, &[3, 4], 0.2, 2.0);
    let unary: [(&'static str, fn(&mut Graph<f64>, NodeId) -> NodeId); 6] = [
        ("leaky_relu", |g, x| g.leaky_relu(x)),
        ("sigmoid", |g, x| g.sigmoid(x)),
        ("activation", |g, x| g.activation(x, Activation::Sigmoid)),
        ("softplus", |g, x| g.softplus(x)),
        ("exp", |g, x| g.exp(x)),
        ("square", |g, x| g.square(x)),
    ];
    for (name, op) in unary {
        check(name, away.clone(), &move |g, x| {
            let y = op(g, x);
            weighted_sum(g, y, 5)
        });
    }
    check("sqrt", positive.clone(), &|g, x| {
        let y = g.sqrt(x);
        weighted_sum(g, y, 6)
    });
    check("scale", away.clone(), &|g, x| {
        let y = g.scale(x, -2.5);
        weighted_sum(g, y, 7)
    });
    check("add_scalar", away.clone(), &|g, x| {
        let y = g.add_scalar(x, 0.75);
        let y = g.square(y);
        weighted_sum(g, y, 8)
    });
    check("clamp", away.clone(), &|g, x| {
        let y = g.clamp(x, -0.5, 0.5);
        weighted_sum(g, y, 9)
    });
    let other = rand_tensor(&mut r, &[3, 4], -1.0, 1.0);
    for (name, which) in [("add", 0), ("sub", 1), ("mul", 2)] {
        let o = other.clone();
        check(name, away.clone(), &move |g, x| {
            let on = g.constant(o.clone());
            let y = match which {
                0 => g.add(x, on)?,
                1 => g.sub(on, x)?,
                _ => g.mul(x, on)?,
            };
            let y = g.square(y);
            weighted_sum(g, y, 10)
        });
    }
    check("sum", away.clone(), &|g, x| {
        let y = g.square(x);
        Ok(g.sum(y))
    });
    check("mean", away.clone(), &|g, x| {
        let y = g.square(x);
        Ok(g.mean(y))
    });
    // Distinct values so the arg-extremum is stable under perturbation.
    let distinct = Tensor::from_fn(vec![3, 4], |i| ((i * 7) % 12) as f64 * 0.1 - 0.5);
    check("max", distinct.clone(), &|g, x| {
        let y = g.square(x);
        g.max(y)
    });
    check("min_last_axis", distinct.clone(), &|g, x| {
        let y = g.min_last_axis(x)?;
        weighted_sum(g, y, 11)
    });
    check("log_softmax_last", away.clone(), &|g, x| {
        let y = g.log_softmax_last(x)?;
        weighted_sum(g, y, 12)
    });
    check("reshape", away.clone(), &|g, x| {
        let y = g.reshape(x, vec![2, 6])?;
        weighted_sum(g, y, 13)
    });
    let cube = rand_tensor(&mut r, &[2, 3, 4], -1.0, 1.0);
    check("permute", cube.clone(), &|g, x| {
        let y = g.permute(x, &[2, 0, 1])?;
        weighted_sum(g, y, 14)
    });
    {
        let o = other.clone();
        check("concat", away.clone(), &move |g, x| {
            let on = g.constant(o.clone());
            let y = g.concat(&[on, x, x])?;
            weighted_sum(g, y, 15)
        });
    }
    check("gather", away.clone(), &|g, x| {
        let y = g.gather(x, vec![0, 3, 3, 11, 5, 0])?;
        weighted_sum(g, y, 16)
    });
    let src = rand_tensor(&mut r, &[3, 5, 5], 0.0, 1.0);
    check("affine_sample", src.clone(), &|g, x| {
        let (y, _) = g.affine_sample(x, 0.37, 1.3, (7, 8))?;
        weighted_sum(g, y, 17)
    });
    let image = rand_tensor(&mut r, &[3, 4, 4], 0.0, 1.0);
    let mask = Tensor::from_fn(vec![1, 4, 4], |i| [1.0, 0.0, 0.5, 0.25][i % 4]);
    {
        let (p, m) = (src.clone(), mask.clone());
        let patch = Tensor::from_fn(vec![3, 4, 4], |i| p.data()[i]);
        let m2 = m.clone();
        check("alpha_composite/image", image.clone(), &move |g, x| {
            let pn = g.constant(patch.clone());
            let y = g.alpha_composite(x, pn, &m2, 0.4)?;
            weighted_sum(g, y, 18)
        });
        let img = image.clone();
        check("alpha_composite/patch", Tensor::from_fn(vec![3, 4, 4], |i| p.data()[i + 3]), &move |g, x| {
            let im = g.constant(img.clone());
            let y = g.alpha_composite(im, x, &m, 0.4)?;
            weighted_sum(g, y, 19)
        });
    }
    out
}

/// Patched image -> tiny detector -> adversarial loss, differentiated with
/// respect to the patch pixels.
pub fn composed_grad_check(kind: LossKind, reduction: Reduction) -> f64 {
    let w = tiny_detector(3);
    let cfg = w.config.clone();
    let mut r = rng(77);
    let image = rand_tensor(&mut r, &[3, 16, 16], 0.0, 1.0);
    let truths = vec![
        BoundingBox::new(0, 0.3, 0.35, 0.55, 0.5),
        BoundingBox::new(1, 0.68, 0.66, 0.5, 0.6),
    ];
    let apply = ApplyConfig {
        size_fraction: 0.8,
        noise_amp: 0.0,
        ..ApplyConfig::default()
    };
    let targets: BTreeSet<usize> = [0, 1].into();
    let log = sample_jitter(&truths, &apply, &targets, (16, 16), &mut r);
    assert_eq!(log.placements.len(), 2);
    let patch = rand_tensor(&mut r, &[3, 4, 4], 0.2, 0.8);
    let gc = grad_check(
        |g, p| {
            let params = w.register(g, false);
            let x = g.constant(image.clone());
            let x = render_placements(g, x, p, &log, 0.8)?;
            let pred = forward_graph(&cfg, g, &params, x)?;
            adversarial_loss(g, pred, kind, reduction, &truths)
        },
        &patch,
        COMPOSED_EPS,
    )
    .unwrap();
    assert!(gc.checked > 0, "{kind} {reduction:?}: no gradient reached the patch");
    gc.max_rel_err
}

pub fn random_box(r: &mut impl Rng, classes: usize) -> BoundingBox {
    let w = r.gen_range(0.05..0.4);
    let h = r.gen_range(0.05..0.4);
    BoundingBox::new(
        r.gen_range(0..classes),
        r.gen_range(w / 2.0..1.0 - w / 2.0),
        r.gen_range(h / 2.0..1.0 - h / 2.0),
        w,
        h,
    )
}

/// Box near `b`, overlapping it by a random amount.
pub fn jittered_box(r: &mut impl Rng, b: &BoundingBox) -> BoundingBox {
    let mut o = *b;
    o.cx += r.gen_range(-0.5..0.5) * b.w;
    o.cy += r.gen_range(-0.5..0.5) * b.h;
    o.w *= r.gen_range(0.6..1.4);
    o.h *= r.gen_range(0.6..1.4);
    o
}

/// Random truths and predictions clustered around them.
pub fn random_instance(r: &mut impl Rng, classes: usize, max_truths: usize) -> (Vec<Detection>, Vec<BoundingBox>) {
    let n = r.gen_range(0..=max_truths);
    let truths: Vec<BoundingBox> = (0..n).map(|_| random_box(r, classes)).collect();
    let mut preds = Vec::new();
    for t in &truths {
        for _ in 0..r.gen_range(0..3) {
            let mut b = jittered_box(r, t);
            if r.gen_bool(0.1) {
                b.class_id = r.gen_range(0..classes);
            }
            preds.push(Detection::new(b, r.gen_range(0.05..1.0), 1.0));
        }
    }
    for _ in 0..r.gen_range(0..3) {
        preds.push(Detection::new(random_box(r, classes), r.gen_range(0.05..1.0), 1.0));
    }
    (preds, truths)
}

/// Lattice covering `[-0.5, 1.5]²`, so boxes hanging past the image still count.
pub const RASTER_RES: usize = 800;
const RASTER_LO: f64 = -0.5;
const RASTER_SPAN: f64 = 2.0;

/// IOU by counting lattice sample points inside each box.
pub fn raster_iou(a: &BoundingBox, b: &BoundingBox, res: usize) -> f64 {
    let inside = |bb: &BoundingBox, x: f64, y: f64| {
        let (x0, y0, x1, y1) = bb.corners();
        x >= x0 && x < x1 && y >= y0 && y < y1
    };
    let (mut inter, mut union) = (0usize, 0usize);
    for i in 0..res {
        let y = RASTER_LO + (i as f64 + 0.5) * RASTER_SPAN / res as f64;
        for j in 0..res {
            let x = RASTER_LO + (j as f64 + 0.5) * RASTER_SPAN / res as f64;
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as usize;
            union += (ia || ib) as usize;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Worst-case raster IOU error: every misclassified sample lies within one
/// cell of an edge, so intersection and union areas each move by at most
/// `(perimeter + 4 cells) · cell`.
pub fn raster_bound(a: &BoundingBox, b: &BoundingBox, res: usize) -> f64 {
    let cell = RASTER_SPAN / res as f64;
    let perim = 2.0 * (a.w + a.h + b.w + b.h) + 8.0 * cell;
    let d = perim * cell;
    let inter = closed_iou(a, b) * (a.w * a.h + b.w * b.h) / (1.0 + closed_iou(a, b));
    let union = a.w * a.h + b.w * b.h - inter;
    // |I'/U' - I/U| <= (|dI| + (I/U)|dU|) / U'
    (d + d) / (union - d).max(1e-12)
}

/// Exact IOU from interval overlap, written independently of the library.
pub fn closed_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ox = ((a.cx + a.w / 2.0).min(b.cx + b.w / 2.0) - (a.cx - a.w / 2.0).max(b.cx - b.w / 2.0)).max(0.0);
    let oy = ((a.cy + a.h / 2.0).min(b.cy + b.h / 2.0) - (a.cy - a.h / 2.0).max(b.cy - b.h / 2.0)).max(0.0);
    let inter = ox * oy;
    let union = a.w * a.h + b.w * b.h - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Maximum-cardinality matching (Kuhn's augmenting paths) over eligible
/// same-class pairs with IOU at or above the threshold.
pub fn optimal_tp(preds: &[Detection], truths: &[BoundingBox], thresh: f64) -> usize {
    let adj: Vec<Vec<usize>> = preds
        .iter()
        .map(|p| {
            truths
                .iter()
                .enumerate()
                .filter(|(_, t)| t.class_id == p.class_id && closed_iou(&p.bbox, t) >= thresh)
                .map(|(i, _)| i)
                .collect()
        })
        .collect();
    fn augment(p: usize, adj: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for &t in &adj[p] {
            if seen[t] {
                continue;
            }
            seen[t] = true;
            if owner[t].map_or(true, |q| augment(q, adj, seen, owner)) {
                owner[t] = Some(p);
                return true;
            }
        }
        false
    }
    let mut owner = vec![None; truths.len()];
    let mut tp = 0;
    for p in 0..preds.len() {
        let mut seen = vec![false; truths.len()];
        if augment(p, &adj, &mut seen, &mut owner) {
            tp += 1;
        }
    }
    tp
}

/// Greedy matching rewritten as a scan over all (prediction, truth) pairs in
/// score-then-IOU order: per prediction (stable score order), pick the free
/// same-class truth of largest IOU.
pub fn greedy_tp_oracle(preds: &[Detection], truths: &[BoundingBox], thresh: f64) -> usize {
    let mut idx: Vec<usize> = (0..preds.len()).collect();
    idx.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    let mut free: Vec<bool> = vec![true; truths.len()];
    let mut tp = 0;
    for p in idx {
        let cand = (0..truths.len())
            .filter(|&t| free[t] && truths[t].class_id == preds[p].class_id)
            .map(|t| (t, closed_iou(&preds[p].bbox, &truths[t])))
            .filter(|&(_, v)| v >= thresh)
            .fold(None::<(usize, f64)>, |best, (t, v)| match best {
                Some((_, bv)) if bv >= v => best,
                _ => Some((t, v)),
            });
        if let Some((t, _)) = cand {
            free[t] = false;
            tp += 1;
        }
    }
    tp
}

/// Scalar mF1 pipeline: pooled per-class counts from the greedy oracle, mean
/// of per-class F1 with 0/0 taken as 0.
pub fn mf1_oracle(preds: &[Vec<Detection>], truths: &[Vec<BoundingBox>], classes: usize, thresh: f64) -> f64 {
    let mut tp = vec![0usize; classes];
    let mut np = vec![0usize; classes];
    let mut nt = vec![0usize; classes];
    for (p, t) in preds.iter().zip(truths) {
        for c in 0..classes {
            let pc: Vec<Detection> = p.iter().filter(|d| d.class_id == c).cloned().collect();
            let tc: Vec<BoundingBox> = t.iter().filter(|b| b.class_id == c).copied().collect();
            tp[c] += greedy_tp_oracle(&pc, &tc, thresh);
            np[c] += pc.len();
            nt[c] += tc.len();
        }
    }
    let f1: Vec<f64> = (0..classes)
        .map(|c| {
            if np[c] + nt[c] == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / (np[c] + nt[c]) as f64
            }
        })
        .collect();
    f1.iter().sum::<f64>() / classes as f64
}

pub fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Largest absolute deviation of each metric from its oracle over `n`
/// randomized instances; panics on any structural disagreement.
pub struct MetricOracleReport {
    /// Raster error divided by its discretization bound.
    pub iou_raster_max_err: f64,
    pub iou_closed_max_err: f64,
    pub match_instances: usize,
    pub greedy_equals_optimal: usize,
    pub greedy_exceeded_optimal: usize,
    pub match_oracle_mismatch: usize,
    pub f1_max_err: f64,
    pub pearson_max_err: f64,
    pub bootstrap_max_z: f64,
}

pub fn metric_oracles(n: usize, seed: u64) -> MetricOracleReport {
    let mut r = rng(seed);
    let mut rep = MetricOracleReport {
        iou_raster_max_err: 0.0,
        iou_closed_max_err: 0.0,
        match_instances: 0,
        greedy_equals_optimal: 0,
        greedy_exceeded_optimal: 0,
        match_oracle_mismatch: 0,
        f1_max_err: 0.0,
        pearson_max_err: 0.0,
        bootstrap_max_z: 0.0,
    };
    for _ in 0..n {
        let a = random_box(&mut r, 1);
        let b = if r.gen_bool(0.8) { jittered_box(&mut r, &a) } else { random_box(&mut r, 1) };
        let v = camo_core::evaluator::iou(&a, &b);
        rep.iou_closed_max_err = rep.iou_closed_max_err.max((v - closed_iou(&a, &b)).abs());
        let ratio = (v - raster_iou(&a, &b, RASTER_RES)).abs() / raster_bound(&a, &b, RASTER_RES);
        rep.iou_raster_max_err = rep.iou_raster_max_err.max(ratio);
    }
    for _ in 0..n {
        let (preds, truths) = random_instance(&mut r, 3, 6);
        let m = match_detections(&preds, &truths, 0.5);
        let opt = optimal_tp(&preds, &truths, 0.5);
        rep.match_instances += 1;
        if m.tp > opt {
            rep.greedy_exceeded_optimal += 1;
        }
        if m.tp == opt {
            rep.greedy_equals_optimal += 1;
        }
        if m.tp != greedy_tp_oracle(&preds, &truths, 0.5) || m.fp + m.tp != preds.len() || m.fn_ + m.tp != truths.len() {
            rep.match_oracle_mismatch += 1;
        }
    }
    for _ in 0..n {
        let images = r.gen_range(1..5);
        let (mut preds, mut truths) = (Vec::new(), Vec::new());
        for _ in 0..images {
            let (p, t) = random_instance(&mut r, 3, 4);
            preds.push(p);
            truths.push(t);
        }
        let params = EvalParams {
            n_boot: 0,
            ..EvalParams::new(3)
        };
        let got = f1_report(&preds, &truths, &params).unwrap().mf1;
        rep.f1_max_err = rep.f1_max_err.max((got - mf1_oracle(&preds, &truths, 3, 0.5)).abs());
    }
    for _ in 0..n {
        let len = r.gen_range(3..12);
        let x: Vec<f64> = (0..len).map(|_| r.gen_range(-5.0..5.0)).collect();
        let slope = r.gen_range(-2.0..2.0);
        let y: Vec<f64> = x.iter().map(|v| slope * v + r.gen_range(-3.0..3.0)).collect();
        let got = pearson(&x, &y).unwrap();
        rep.pearson_max_err = rep.pearson_max_err.max((got - pearson_oracle(&x, &y)).abs());
    }
    // Bootstrap of the mean: sigma = population std / sqrt(n); the estimate's
    // own standard error is about sigma / sqrt(2 n_boot).
    let n_boot = 2000;
    for i in 0..n {
        let len = r.gen_range(2..10);
        let items: Vec<f64> = (0..len).map(|_| r.gen_range(0.0..1.0)).collect();
        let m = items.iter().sum::<f64>() / len as f64;
        let pop = (items.iter().map(|v| (v - m).powi(2)).sum::<f64>() / len as f64).sqrt();
        let expected = pop / (len as f64).sqrt();
        let got = bootstrap_sigma(&items, n_boot, i as u64, |s| s.iter().copied().sum::<f64>() / s.len() as f64);
        let se = expected / (2.0 * n_boot as f64).sqrt();
        rep.bootstrap_max_z = rep.bootstrap_max_z.max((got - expected).abs() / se);
    }
    rep
}

/// Tolerances the metric oracle checks are held to.
pub const IOU_CLOSED_TOL: f64 = 1e-12;
/// Raster disagreement as a fraction of its worst-case discretization bound.
pub const IOU_RASTER_TOL: f64 = 1.0;
pub const F1_TOL: f64 = 1e-12;
pub const PEARSON_TOL: f64 = 1e-9;
/// Bootstrap estimates stay within this many of their own standard errors.
pub const BOOTSTRAP_Z: f64 = 5.0;
pub const GREEDY_OPTIMAL_SHARE: f64 = 0.95;

impl MetricOracleReport {
    pub fn failures(&self) -> Vec<String> {
        let mut f = Vec::new();
        if self.iou_closed_max_err > IOU_CLOSED_TOL {
            f.push(format!("iou vs closed form: {}", self.iou_closed_max_err));
        }
        if self.iou_raster_max_err > IOU_RASTER_TOL {
            f.push(format!("iou vs raster: {} of the discretization bound", self.iou_raster_max_err));
        }
        if self.greedy_exceeded_optimal > 0 {
            f.push(format!("greedy beat optimal {} times", self.greedy_exceeded_optimal));
        }
        let share = self.greedy_equals_optimal as f64 / self.match_instances as f64;
        if share < GREEDY_OPTIMAL_SHARE {
            f.push(format!("greedy equals optimal on only {share:.3}"));
        }
        if self.match_oracle_mismatch > 0 {
            f.push(format!("match disagreed with greedy oracle {} times", self.match_oracle_mismatch));
        }
        if self.f1_max_err > F1_TOL {
            f.push(format!("f1_report vs scalar pipeline: {}", self.f1_max_err));
        }
        if self.pearson_max_err > PEARSON_TOL {
            f.push(format!("pearson vs two-pass: {}", self.pearson_max_err));
        }
        if self.bootstrap_max_z > BOOTSTRAP_Z {
            f.push(format!("bootstrap sigma off by {:.2} standard errors", self.bootstrap_max_z));
        }
        f
    }
}
