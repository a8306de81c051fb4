use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::metrics::{detection_score, f1_report, mf1_reduction, pearson, EvalParams, EvalReport};
use crate::bbox::BoundingBox;
use crate::dataset::LabeledImage;
use crate::detector::{predict, DetectParams, Detection, DetectorWeights};
use crate::error::{Error, Result};
use crate::patcher::{apply_patches_with, ApplyConfig, Patch};

pub const SWEEP_HEADER: &str =
    "name,size_fraction,alpha,mf1_camo,f1_patch,detection_score,mf1_reduction_pct";

/// One evaluated patch.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub name: String,
    pub size_fraction: f64,
    pub alpha: f64,
    pub mf1_camo: f64,
    pub f1_patch: f64,
    pub detection_score: f64,
    /// `None` when the baseline mF1 is 0.
    pub mf1_reduction_pct: Option<f64>,
}

impl SweepRow {
    pub fn new(name: impl Into<String>, size_fraction: f64, alpha: f64, mf1_camo: f64, f1_patch: f64, baseline: f64) -> Self {
        Self {
            name: name.into(),
            size_fraction,
            alpha,
            mf1_camo,
            f1_patch,
            detection_score: detection_score(mf1_camo, f1_patch),
            mf1_reduction_pct: mf1_reduction(baseline, mf1_camo).ok(),
        }
    }

    pub fn score_invariant_holds(&self) -> bool {
        self.detection_score == self.mf1_camo.max(self.f1_patch)
    }
}

/// A patch and how to apply it.
#[derive(Clone, Debug)]
pub struct SweepEntry {
    pub patch: Patch,
    pub apply: ApplyConfig,
}

#[derive(Clone, Copy, Debug)]
pub struct SweepOptions {
    pub detect: DetectParams,
    pub n_boot: usize,
    pub seed: u64,
    /// Patches evaluated concurrently; 0 uses the available parallelism.
    pub threads: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            detect: DetectParams::default(),
            n_boot: 200,
            seed: 0,
            threads: 0,
        }
    }
}

/// Correlations across the sweep; `None` where undefined (e.g. a constant column).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PearsonSummary {
    pub reduction_vs_size: Option<f64>,
    pub reduction_vs_alpha: Option<f64>,
    pub score_vs_size: Option<f64>,
    pub score_vs_alpha: Option<f64>,
}

impl PearsonSummary {
    pub fn from_rows(rows: &[SweepRow]) -> Self {
        let col = |f: fn(&SweepRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
        let (size, alpha) = (col(|r| r.size_fraction), col(|r| r.alpha));
        let score = col(|r| r.detection_score);
        let red: Option<Vec<f64>> = rows.iter().map(|r| r.mf1_reduction_pct).collect();
        let with_red = |x: &[f64]| red.as_ref().and_then(|r| pearson(r, x).ok());
        Self {
            reduction_vs_size: with_red(&size),
            reduction_vs_alpha: with_red(&alpha),
            score_vs_size: pearson(&score, &size).ok(),
            score_vs_alpha: pearson(&score, &alpha).ok(),
        }
    }

    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map_or("undefined".into(), |x: f64| format!("{x}"));
        format!(
            "pair,pearson\nreduction_vs_size,{}\nreduction_vs_alpha,{}\nscore_vs_size,{}\nscore_vs_alpha,{}\n",
            f(self.reduction_vs_size),
            f(self.reduction_vs_alpha),
            f(self.score_vs_size),
            f(self.score_vs_alpha)
        )
    }
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub baseline: EvalReport,
    pub rows: Vec<SweepRow>,
    pub summary: PearsonSummary,
}

/// Class-agnostic F1 of patch detections against placement squares.
pub fn patch_f1(preds: &[Vec<Detection>], placements: &[Vec<BoundingBox>], opts: &SweepOptions) -> Result<EvalReport> {
    let preds: Vec<Vec<Detection>> = preds
        .iter()
        .map(|v| {
            v.iter()
                .map(|d| {
                    let mut d = d.clone();
                    d.class_id = 0;
                    d.bbox.class_id = 0;
                    d
                })
                .collect()
        })
        .collect();
    let params = EvalParams {
        n_boot: opts.n_boot,
        seed: opts.seed,
        ..EvalParams::new(1)
    };
    f1_report(&preds, placements, &params)
}

/// Patched copies of `test` plus the placement square of every patch as a
/// class-0 box.
pub fn patched_test_set(test: &[LabeledImage], entry: &SweepEntry) -> Result<(Vec<LabeledImage>, Vec<Vec<BoundingBox>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(entry.apply.seed);
    let mut images = Vec::with_capacity(test.len());
    let mut squares = Vec::with_capacity(test.len());
    for s in test {
        let targets: BTreeSet<usize> = s.boxes.iter().map(|b| b.class_id).collect();
        let (img, log) = apply_patches_with(&s.image, &s.boxes, &entry.patch, &entry.apply, &targets, &mut rng)?;
        squares.push(log.placements.iter().map(|p| p.bbox(s.size(), 0)).collect());
        images.push(LabeledImage {
            image: img,
            boxes: s.boxes.clone(),
            source: s.source.clone(),
        });
    }
    Ok((images, squares))
}

fn vehicle_params(detector: &DetectorWeights, opts: &SweepOptions) -> EvalParams {
    EvalParams {
        n_boot: opts.n_boot,
        seed: opts.seed,
        ..EvalParams::new(detector.config.num_classes)
    }
}

/// Vehicle mF1 on clean imagery.
pub fn baseline_report(detector: &DetectorWeights, test: &[LabeledImage], opts: &SweepOptions) -> Result<EvalReport> {
    let preds = predict(detector, test, opts.detect)?;
    let truths: Vec<_> = test.iter().map(|s| s.boxes.clone()).collect();
    f1_report(&preds, &truths, &vehicle_params(detector, opts))
}

fn evaluate_entry(
    detector: &DetectorWeights,
    patch_detector: &DetectorWeights,
    test: &[LabeledImage],
    entry: &SweepEntry,
    baseline: f64,
    opts: &SweepOptions,
) -> Result<SweepRow> {
    let (patched, squares) = patched_test_set(test, entry)?;
    let truths: Vec<_> = patched.iter().map(|s| s.boxes.clone()).collect();
    let vehicle = predict(detector, &patched, opts.detect)?;
    let camo = f1_report(&vehicle, &truths, &vehicle_params(detector, opts))?;
    let found = predict(patch_detector, &patched, opts.detect)?;
    let patch = patch_f1(&found, &squares, opts)?;
    Ok(SweepRow::new(
        entry.patch.name.clone(),
        entry.apply.size_fraction,
        entry.apply.alpha,
        camo.mf1,
        patch.mf1,
        baseline,
    ))
}

/// Scores every patch for vehicle camouflage and for patch detectability.
pub fn run_sweep(
    detector: &DetectorWeights,
    patch_detector: &DetectorWeights,
    library: &[SweepEntry],
    test: &[LabeledImage],
    opts: &SweepOptions,
) -> Result<SweepResult> {
    if library.is_empty() {
        return Err(Error::Usage("sweep needs at least one patch".into()));
    }
    let baseline = baseline_report(detector, test, opts)?;
    let threads = match opts.threads {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
    .min(library.len());
    let chunk = library.len().div_ceil(threads);
    let rows: Vec<SweepRow> = std::thread::scope(|scope| {
        let handles: Vec<_> = library
            .chunks(chunk)
            .map(|part| {
                let mf1 = baseline.mf1;
                scope.spawn(move || {
                    part.iter()
                        .map(|e| evaluate_entry(detector, patch_detector, test, e, mf1, opts))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep worker panicked"))
            .collect::<Result<Vec<Vec<_>>>>()
    })?
    .into_iter()
    .flatten()
    .collect();
    Ok(SweepResult {
        baseline,
        summary: PearsonSummary::from_rows(&rows),
        rows,
    })
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.name,
            r.size_fraction,
            r.alpha,
            r.mf1_camo,
            r.f1_patch,
            r.detection_score,
            r.mf1_reduction_pct.map_or("undefined".into(), |v| v.to_string())
        );
    }
    s
}

/// Parses a sweep CSV; errors carry 1-based line numbers.
pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == SWEEP_HEADER => {}
        Some((_, h)) => {
            return Err(Error::Parse {
                line: 1,
                detail: format!("unexpected header `{h}`"),
            })
        }
        None => {
            return Err(Error::Parse {
                line: 1,
                detail: "empty sweep file".into(),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let line = i + 1;
            let f: Vec<&str> = l.split(',').map(str::trim).collect();
            if f.len() != 7 {
                return Err(Error::Parse {
                    line,
                    detail: format!("expected 7 fields, found {}", f.len()),
                });
            }
            let num = |j: usize| {
                f[j].parse::<f64>().map_err(|e| Error::Parse {
                    line,
                    detail: format!("field {} `{}`: {e}", j + 1, f[j]),
                })
            };
            Ok(SweepRow {
                name: f[0].to_string(),
                size_fraction: num(1)?,
                alpha: num(2)?,
                mf1_camo: num(3)?,
                f1_patch: num(4)?,
                detection_score: num(5)?,
                mf1_reduction_pct: if f[6] == "undefined" { None } else { Some(num(6)?) },
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let rows = vec![
            SweepRow::new("a", 0.3, 1.0, 0.25, 0.13, 0.55),
            SweepRow::new("b", 0.1, 0.5, 1.0 / 3.0, 0.9, 0.55),
            SweepRow::new("c", 0.1, 0.5, 0.0, 0.9, 0.0),
        ];
        let back = parse_sweep_csv(&sweep_csv(&rows)).unwrap();
        assert_eq!(back, rows);
        assert!(back.iter().all(SweepRow::score_invariant_holds));
    }

    #[test]
    fn malformed_csv_names_line() {
        let text = format!("{SWEEP_HEADER}\na,0.1,1,0.5,0.5,0.5,1\nb,0.1,x,0.5,0.5,0.5,1\n");
        match parse_sweep_csv(&text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn hand_computed_summary() {
        // reduction 10, 20, 60 against size 0.1, 0.2, 0.3:
        // dx = -0.1, 0, 0.1; dy = -20, -10, 30 -> r = 5 / (sqrt(0.02) * sqrt(1400))
        let rows: Vec<SweepRow> = [(0.1, 0.495), (0.2, 0.44), (0.3, 0.22)]
            .iter()
            .map(|&(s, camo)| SweepRow::new("p", s, 1.0, camo, 0.0, 0.55))
            .collect();
        let sum = PearsonSummary::from_rows(&rows);
        let expect = 5.0 / (0.02f64.sqrt() * 1400f64.sqrt());
        assert!((sum.reduction_vs_size.unwrap() - expect).abs() < 1e-9);
        assert!((sum.score_vs_size.unwrap() + expect).abs() < 1e-9);
        assert_eq!(sum.reduction_vs_alpha, None);
    }
}
