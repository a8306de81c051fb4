use std::cmp::Ordering;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bbox::BoundingBox;
use crate::detector::Detection;
use crate::error::{Error, Result};

pub const DEFAULT_IOU: f64 = 0.5;
pub const DEFAULT_BOOTSTRAP: usize = 1000;

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    a.iou(b)
}

/// Treats stored boxes as detections scored by their confidence (1 when absent).
pub fn as_detections(boxes: &[BoundingBox]) -> Vec<Detection> {
    boxes
        .iter()
        .map(|b| {
            let c = b.confidence.unwrap_or(1.0);
            Detection::new(*b, c, 1.0)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Matching {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// Matched truth index for each prediction, in input order.
    pub assignment: Vec<Option<usize>>,
}

/// Greedy matching in descending score order (ties keep input order). A
/// prediction takes the unmatched same-class truth with the highest IOU,
/// provided it reaches `iou_thresh`.
pub fn match_detections(preds: &[Detection], truths: &[BoundingBox], iou_thresh: f64) -> Matching {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .score
            .partial_cmp(&preds[a].score)
            .unwrap_or(Ordering::Equal)
    });
    let mut taken = vec![false; truths.len()];
    let mut assignment = vec![None; preds.len()];
    for &pi in &order {
        let p = &preds[pi];
        let mut best: Option<(usize, f64)> = None;
        for (ti, t) in truths.iter().enumerate() {
            if taken[ti] || t.class_id != p.class_id {
                continue;
            }
            let v = p.bbox.iou(t);
            if v >= iou_thresh && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((ti, v));
            }
        }
        if let Some((ti, _)) = best {
            taken[ti] = true;
            assignment[pi] = Some(ti);
        }
    }
    let tp = assignment.iter().filter(|a| a.is_some()).count();
    Matching {
        tp,
        fp: preds.len() - tp,
        fn_: truths.len() - tp,
        assignment,
    }
}

/// Per-class match counts for one image.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ImageCounts {
    pub tp: Vec<usize>,
    pub fp: Vec<usize>,
    pub fn_: Vec<usize>,
}

impl ImageCounts {
    pub fn zeros(num_classes: usize) -> Self {
        Self {
            tp: vec![0; num_classes],
            fp: vec![0; num_classes],
            fn_: vec![0; num_classes],
        }
    }

    fn add(&mut self, other: &Self) {
        for (a, b) in [
            (&mut self.tp, &other.tp),
            (&mut self.fp, &other.fp),
            (&mut self.fn_, &other.fn_),
        ] {
            a.iter_mut().zip(b).for_each(|(a, b)| *a += b);
        }
    }
}

/// Matches one image and splits the counts by class. Classes at or beyond
/// `num_classes` are an error.
pub fn image_counts(
    preds: &[Detection],
    truths: &[BoundingBox],
    num_classes: usize,
    iou_thresh: f64,
) -> Result<ImageCounts> {
    let bad = preds
        .iter()
        .map(|p| p.class_id)
        .chain(truths.iter().map(|t| t.class_id))
        .find(|&c| c >= num_classes);
    if let Some(c) = bad {
        return Err(Error::Usage(format!("class id {c} outside the {num_classes} evaluated classes")));
    }
    let m = match_detections(preds, truths, iou_thresh);
    let mut c = ImageCounts::zeros(num_classes);
    for (p, a) in preds.iter().zip(&m.assignment) {
        if a.is_some() {
            c.tp[p.class_id] += 1;
        } else {
            c.fp[p.class_id] += 1;
        }
    }
    let mut matched = vec![false; truths.len()];
    m.assignment.iter().flatten().for_each(|&t| matched[t] = true);
    for (t, &ok) in truths.iter().zip(&matched) {
        if !ok {
            c.fn_[t.class_id] += 1;
        }
    }
    Ok(c)
}

/// `(precision, recall, f1)` with `0/0` taken as 0.
pub fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

fn per_class_f1(total: &ImageCounts) -> Vec<f64> {
    (0..total.tp.len())
        .map(|k| prf(total.tp[k], total.fp[k], total.fn_[k]).2)
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Standard deviation of `stat` over `n_boot` resamples (with replacement) of
/// `items`.
pub fn bootstrap_sigma<S>(items: &[S], n_boot: usize, seed: u64, stat: impl Fn(&[&S]) -> f64) -> f64 {
    bootstrap_many(items, n_boot, seed, |s| vec![stat(s)])[0]
}

/// Like [`bootstrap_sigma`] for a vector-valued statistic, sharing resamples.
pub fn bootstrap_many<S>(
    items: &[S],
    n_boot: usize,
    seed: u64,
    stat: impl Fn(&[&S]) -> Vec<f64>,
) -> Vec<f64> {
    if items.is_empty() || n_boot == 0 {
        return stat(&[]).iter().map(|_| 0.0).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws: Vec<Vec<f64>> = Vec::with_capacity(n_boot);
    let mut sample: Vec<&S> = Vec::with_capacity(items.len());
    for _ in 0..n_boot {
        sample.clear();
        sample.extend((0..items.len()).map(|_| &items[rng.gen_range(0..items.len())]));
        draws.push(stat(&sample));
    }
    let dims = draws[0].len();
    (0..dims)
        .map(|d| {
            let vals: Vec<f64> = draws.iter().map(|v| v[d]).collect();
            let m = mean(&vals);
            (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub f1_sigma: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub classes: Vec<ClassScore>,
    /// Unweighted mean of the per-class F1.
    pub mf1: f64,
    pub mf1_sigma: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub iou_thresh: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalParams {
    pub num_classes: usize,
    pub iou_thresh: f64,
    pub n_boot: usize,
    pub seed: u64,
}

impl EvalParams {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            iou_thresh: DEFAULT_IOU,
            n_boot: DEFAULT_BOOTSTRAP,
            seed: 0,
        }
    }
}

/// Aggregates matches over all images into per-class P/R/F1 and mF1, with
/// bootstrap errors from resampling whole images.
pub fn f1_report(
    preds: &[Vec<Detection>],
    truths: &[Vec<BoundingBox>],
    params: &EvalParams,
) -> Result<EvalReport> {
    if preds.len() != truths.len() {
        return Err(Error::Usage(format!(
            "{} prediction lists for {} images",
            preds.len(),
            truths.len()
        )));
    }
    let k = params.num_classes;
    let per_image = preds
        .iter()
        .zip(truths)
        .map(|(p, t)| image_counts(p, t, k, params.iou_thresh))
        .collect::<Result<Vec<_>>>()?;
    let sum = |imgs: &[&ImageCounts]| {
        let mut tot = ImageCounts::zeros(k);
        imgs.iter().for_each(|c| tot.add(c));
        tot
    };
    let refs: Vec<&ImageCounts> = per_image.iter().collect();
    let total = sum(&refs);
    let sigmas = bootstrap_many(&per_image, params.n_boot, params.seed, |s| {
        let f = per_class_f1(&sum(s));
        let m = mean(&f);
        f.into_iter().chain(std::iter::once(m)).collect()
    });
    let classes: Vec<ClassScore> = (0..k)
        .map(|c| {
            let (precision, recall, f1) = prf(total.tp[c], total.fp[c], total.fn_[c]);
            ClassScore {
                precision,
                recall,
                f1,
                f1_sigma: sigmas[c],
                tp: total.tp[c],
                fp: total.fp[c],
                fn_: total.fn_[c],
            }
        })
        .collect();
    let f1s: Vec<f64> = classes.iter().map(|c| c.f1).collect();
    Ok(EvalReport {
        mf1: mean(&f1s),
        mf1_sigma: sigmas[k],
        tp: total.tp.iter().sum(),
        fp: total.fp.iter().sum(),
        fn_: total.fn_.iter().sum(),
        iou_thresh: params.iou_thresh,
        classes,
    })
}

impl EvalReport {
    /// One row per class plus a `mean` row.
    pub fn to_csv(&self, names: &[String]) -> String {
        let mut s = String::from("class,precision,recall,f1,f1_sigma,tp,fp,fn\n");
        for (i, c) in self.classes.iter().enumerate() {
            let name = names.get(i).cloned().unwrap_or_else(|| format!("class_{i}"));
            let _ = writeln!(
                s,
                "{name},{:.6},{:.6},{:.6},{:.6},{},{},{}",
                c.precision, c.recall, c.f1, c.f1_sigma, c.tp, c.fp, c.fn_
            );
        }
        let p = mean(&self.classes.iter().map(|c| c.precision).collect::<Vec<_>>());
        let r = mean(&self.classes.iter().map(|c| c.recall).collect::<Vec<_>>());
        let _ = writeln!(
            s,
            "mean,{p:.6},{r:.6},{:.6},{:.6},{},{},{}",
            self.mf1, self.mf1_sigma, self.tp, self.fp, self.fn_
        );
        s
    }
}

/// Product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Parameter(format!(
            "pearson needs equal lengths, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::Undefined("pearson needs at least two points".into()));
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("pearson correlation with zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// The better of the two ways to find a camouflaged object; lower favors
/// the camouflage.
pub fn detection_score(mf1_camo: f64, f1_patch: f64) -> f64 {
    mf1_camo.max(f1_patch)
}

/// Percentage drop of mF1 from `baseline` to `camo`.
pub fn mf1_reduction(baseline: f64, camo: f64) -> Result<f64> {
    if baseline <= 0.0 {
        return Err(Error::Undefined(format!(
            "mF1 reduction needs a positive baseline, got {baseline}"
        )));
    }
    Ok(100.0 * (baseline - camo) / baseline)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(c: usize, cx: f64, score: f64) -> Detection {
        Detection::new(BoundingBox::new(c, cx, 0.5, 0.1, 0.1), score, 1.0)
    }

    #[test]
    fn iou_cases() {
        let a = BoundingBox::new(0, 0.5, 0.5, 0.2, 0.2);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BoundingBox::new(0, 0.1, 0.1, 0.1, 0.1)), 0.0);
        let b = BoundingBox::new(0, 0.6, 0.5, 0.2, 0.2);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_empty_matching() {
        let truths: Vec<BoundingBox> = (0..3).map(|i| det(i % 2, 0.2 + 0.3 * i as f64, 1.0).bbox).collect();
        let m = match_detections(&as_detections(&truths), &truths, 0.5);
        assert_eq!((m.tp, m.fp, m.fn_), (3, 0, 0));
        let m = match_detections(&[], &truths, 0.5);
        assert_eq!((m.tp, m.fp, m.fn_), (0, 0, 3));
    }

    #[test]
    fn class_mismatch_is_not_a_match() {
        let t = [det(1, 0.5, 1.0).bbox];
        let m = match_detections(&[det(0, 0.5, 0.9)], &t, 0.5);
        assert_eq!((m.tp, m.fp, m.fn_), (0, 1, 1));
    }

    #[test]
    fn f1_formula_instance() {
        // two truths of class 0, one correct prediction: P = 1, R = 0.5
        let truths = vec![vec![det(0, 0.2, 1.0).bbox, det(0, 0.7, 1.0).bbox]];
        let preds = vec![vec![det(0, 0.2, 0.9)]];
        let r = f1_report(&preds, &truths, &EvalParams::new(1)).unwrap();
        assert_eq!(r.classes[0].precision, 1.0);
        assert_eq!(r.classes[0].recall, 0.5);
        assert!((r.mf1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn unweighted_class_mean() {
        let f = [0.59, 0.72, 0.43, 0.46];
        assert!((mean(&f) - 0.55).abs() < 1e-12);
    }

    #[test]
    fn pearson_cases() {
        let x = [1.0, 2.0, 3.0, 4.5];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((pearson(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        let y: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &y).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(pearson(&x, &[1.0; 4]), Err(Error::Undefined(_))));
        // x = 1..6, y = [2,1,4,3,6,5]: Sxy = 14.5, Sxx = Syy = 17.5 -> 29/35
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let y = [2.0, 1.0, 4.0, 3.0, 6.0, 5.0];
        assert!((pearson(&x, &y).unwrap() - 29.0 / 35.0).abs() < 1e-12);
    }

    #[test]
    fn score_and_reduction() {
        assert_eq!(detection_score(0.25, 0.13), 0.25);
        assert_eq!(detection_score(0.38, 0.12), 0.38);
        assert_eq!(detection_score(0.4, 0.4), 0.4);
        assert_eq!(mf1_reduction(0.55, 0.55).unwrap(), 0.0);
        assert!((mf1_reduction(0.55, 0.275).unwrap() - 50.0).abs() < 1e-12);
        assert!((mf1_reduction(0.55, 0.28).unwrap() - 49.09).abs() < 0.01);
        assert!(matches!(mf1_reduction(0.0, 0.1), Err(Error::Undefined(_))));
    }
}
