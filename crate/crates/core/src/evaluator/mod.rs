//! Detection scoring: IOU matching, per-class F1 with bootstrap errors,
//! correlation, and the patch sweep that compares camouflage against patch
//! detectability.

mod metrics;
mod report;
mod sweep;

pub use metrics::{
    as_detections, bootstrap_many, bootstrap_sigma, detection_score, f1_report, image_counts, iou,
    match_detections, mf1_reduction, pearson, prf, ClassScore, EvalParams, EvalReport, ImageCounts,
    Matching, DEFAULT_BOOTSTRAP, DEFAULT_IOU,
};
pub use report::{bar_chart_svg, scatter_svg};
pub use sweep::{
    baseline_report, parse_sweep_csv, patch_f1, patched_test_set, run_sweep, sweep_csv,
    PearsonSummary, SweepEntry, SweepOptions, SweepResult, SweepRow, SWEEP_HEADER,
};
