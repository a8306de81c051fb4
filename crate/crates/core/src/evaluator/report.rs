//! Minimal SVG charts for sweep results.

use std::fmt::Write as _;

use super::sweep::SweepRow;

const CAMO_COLOR: &str = "#1f77b4";
const PATCH_COLOR: &str = "#ff7f0e";

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Per-patch bars of `mf1_camo` and `f1_patch`, with the clean-imagery mF1
/// drawn as a horizontal line.
pub fn bar_chart_svg(rows: &[SweepRow], baseline_mf1: f64) -> String {
    let (left, top, plot_h, group_w) = (50.0, 20.0, 240.0, 28.0);
    let width = left + group_w * rows.len().max(1) as f64 + 20.0;
    let height = top + plot_h + 140.0;
    let y = |v: f64| top + plot_h * (1.0 - v.clamp(0.0, 1.0));
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(
        s,
        r#"<line class="axis" x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#,
        top + plot_h
    );
    for t in 0..=4 {
        let v = t as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{v:.2}</text>"#,
            left - 4.0,
            y(v) + 3.0
        );
    }
    for (i, r) in rows.iter().enumerate() {
        let x0 = left + group_w * i as f64 + 3.0;
        let bw = (group_w - 6.0) / 2.0;
        let _ = writeln!(s, r#"<g class="bar-group">"#);
        for (j, (v, color)) in [(r.mf1_camo, CAMO_COLOR), (r.f1_patch, PATCH_COLOR)].iter().enumerate() {
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{bw:.2}" height="{:.2}" fill="{color}"/>"#,
                x0 + bw * j as f64,
                y(*v),
                top + plot_h - y(*v)
            );
        }
        let lx = x0 + bw;
        let ly = top + plot_h + 8.0;
        let _ = writeln!(
            s,
            r#"<text x="{lx:.2}" y="{ly:.2}" transform="rotate(60 {lx:.2} {ly:.2})">{}</text>"#,
            escape(&r.name)
        );
        let _ = writeln!(s, "</g>");
    }
    let _ = writeln!(
        s,
        r#"<line class="baseline" x1="{left}" y1="{by:.2}" x2="{}" y2="{by:.2}" stroke="black" stroke-dasharray="4 2"/>"#,
        width - 20.0,
        by = y(baseline_mf1)
    );
    let _ = writeln!(s, "</svg>");
    s
}

/// Scatter of `mf1_reduction_pct` and `detection_score` (scaled to percent)
/// against one sweep variable.
pub fn scatter_svg(rows: &[SweepRow], x_label: &str, x_of: fn(&SweepRow) -> f64) -> String {
    let (left, top, w, h) = (50.0, 20.0, 300.0, 200.0);
    let xs: Vec<f64> = rows.iter().map(x_of).collect();
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let px = |v: f64| left + w * (v - lo) / span;
    let py = |v: f64| top + h * (1.0 - (v / 100.0).clamp(-1.0, 1.0)) / 2.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="10">"#,
        left + w + 20.0,
        top + h + 40.0
    );
    let _ = writeln!(
        s,
        r#"<line class="axis" x1="{left}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        py(0.0),
        left + w,
        py(0.0)
    );
    for r in rows {
        let x = px(x_of(r));
        if let Some(red) = r.mf1_reduction_pct {
            let _ = writeln!(
                s,
                r#"<circle class="reduction" cx="{x:.2}" cy="{:.2}" r="3" fill="{CAMO_COLOR}"/>"#,
                py(red)
            );
        }
        let _ = writeln!(
            s,
            r#"<circle class="score" cx="{x:.2}" cy="{:.2}" r="3" fill="{PATCH_COLOR}"/>"#,
            py(100.0 * r.detection_score)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        left + w / 2.0,
        top + h + 30.0,
        escape(x_label)
    );
    let _ = writeln!(s, "</svg>");
    s
}
