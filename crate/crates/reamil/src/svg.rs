//! Plain-text SVG emitters: the mean K-curve chart (solid mean line,
//! +/-1 std band, dashed mean-MSK marker) and the per-slide evidence
//! overlay (tile rectangles shaded by gate value, top-K outlined).
//!
//! Everything is formatted with fixed precision so identical inputs
//! produce byte-identical documents.

use crate::metrics::{msk, KCurve, MetricsError};
use crate::model::EvidenceExportRow;
use std::fmt::Write as _;

const CHART_W: f64 = 640.0;
const CHART_H: f64 = 420.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 50.0;

/// Number of evaluation points for the resampled mean curve.
const GRID_POINTS: usize = 101;

fn px(v: f64) -> String {
    format!("{v:.2}")
}

/// Maps kappa in [0, 1] to an x pixel inside the plot area.
fn x_px(kappa: f64) -> f64 {
    MARGIN_L + kappa * (CHART_W - MARGIN_L - MARGIN_R)
}

/// Maps a probability in [0, 1] to a y pixel (origin top-left).
fn y_px(p: f64) -> f64 {
    MARGIN_T + (1.0 - p) * (CHART_H - MARGIN_T - MARGIN_B)
}

/// Renders the dataset-level K-curve figure: every slide's curve is
/// resampled onto a common kappa grid, then the pointwise mean is drawn
/// as a solid line with a +/-1 std band (clipped to [0, 1]) behind it.
/// If any slide reaches `tau`, a dashed vertical marker is placed at the
/// mean sufficient evidence fraction mean(MSK_s / N_s).
pub fn kcurve_mean_svg(curves: &[KCurve], tau: f64) -> Result<String, MetricsError> {
    if curves.is_empty() {
        return Err(MetricsError::EmptyInput);
    }

    let kappas: Vec<f64> = (0..GRID_POINTS)
        .map(|i| i as f64 / (GRID_POINTS - 1) as f64)
        .collect();
    let mut means = Vec::with_capacity(GRID_POINTS);
    let mut stds = Vec::with_capacity(GRID_POINTS);
    for &k in &kappas {
        let vals: Vec<f64> = curves.iter().map(|c| c.interpolate(k)).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        means.push(mean);
        stds.push(var.sqrt());
    }

    // Mean sufficient fraction across the slides that reach tau.
    let reached: Vec<f64> = curves
        .iter()
        .filter_map(|c| msk(c, tau).map(|k| k as f64 / c.n_tiles() as f64))
        .collect();
    let msk_kappa = if reached.is_empty() {
        None
    } else {
        Some(reached.iter().sum::<f64>() / reached.len() as f64)
    };

    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{CHART_W}\" height=\"{CHART_H}\" viewBox=\"0 0 {CHART_W} {CHART_H}\">"
    );
    let _ = writeln!(
        s,
        "  <rect x=\"0\" y=\"0\" width=\"{CHART_W}\" height=\"{CHART_H}\" fill=\"#ffffff\"/>"
    );
    let _ = writeln!(
        s,
        "  <text x=\"{}\" y=\"18\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">Mean K-curve (solid) with +/-1 std band</text>",
        px((MARGIN_L + CHART_W - MARGIN_R) / 2.0)
    );

    // +/-1 std band: upper edge left to right, lower edge back.
    let mut pts = String::new();
    for (i, &k) in kappas.iter().enumerate() {
        let hi = (means[i] + stds[i]).min(1.0);
        let _ = write!(pts, "{},{} ", px(x_px(k)), px(y_px(hi)));
    }
    for (i, &k) in kappas.iter().enumerate().rev() {
        let lo = (means[i] - stds[i]).max(0.0);
        let _ = write!(pts, "{},{} ", px(x_px(k)), px(y_px(lo)));
    }
    let _ = writeln!(
        s,
        "  <polygon points=\"{}\" fill=\"#9ec9ff\" fill-opacity=\"0.45\" stroke=\"none\"/>",
        pts.trim_end()
    );

    // Mean line.
    let mut line = String::new();
    for (i, &k) in kappas.iter().enumerate() {
        let _ = write!(line, "{},{} ", px(x_px(k)), px(y_px(means[i])));
    }
    let _ = writeln!(
        s,
        "  <polyline points=\"{}\" fill=\"none\" stroke=\"#0b4f9e\" stroke-width=\"2\"/>",
        line.trim_end()
    );

    // Dashed vertical marker at the mean sufficient fraction.
    if let Some(mk) = msk_kappa {
        let x = px(x_px(mk));
        let _ = writeln!(
            s,
            "  <line x1=\"{x}\" y1=\"{}\" x2=\"{x}\" y2=\"{}\" stroke=\"#c0392b\" stroke-width=\"1.5\" stroke-dasharray=\"6 4\"/>",
            px(MARGIN_T),
            px(CHART_H - MARGIN_B)
        );
        let _ = writeln!(
            s,
            "  <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#c0392b\">mean MSK at kappa={}</text>",
            px(x_px(mk) + 6.0),
            px(MARGIN_T + 14.0),
            px(mk)
        );
    }

    // Axes.
    let _ = writeln!(
        s,
        "  <line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#000000\" stroke-width=\"1\"/>",
        px(MARGIN_L),
        px(CHART_H - MARGIN_B),
        px(CHART_W - MARGIN_R),
        px(CHART_H - MARGIN_B)
    );
    let _ = writeln!(
        s,
        "  <line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#000000\" stroke-width=\"1\"/>",
        px(MARGIN_L),
        px(MARGIN_T),
        px(MARGIN_L),
        px(CHART_H - MARGIN_B)
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let label = format!("{t:.2}");
        let x = x_px(t);
        let y = CHART_H - MARGIN_B;
        let _ = writeln!(
            s,
            "  <line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#000000\" stroke-width=\"1\"/>",
            px(x),
            px(y),
            px(x),
            px(y + 5.0)
        );
        let _ = writeln!(
            s,
            "  <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{label}</text>",
            px(x),
            px(y + 18.0)
        );
        let yv = y_px(t);
        let _ = writeln!(
            s,
            "  <line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#000000\" stroke-width=\"1\"/>",
            px(MARGIN_L - 5.0),
            px(yv),
            px(MARGIN_L),
            px(yv)
        );
        let _ = writeln!(
            s,
            "  <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{label}</text>",
            px(MARGIN_L - 8.0),
            px(yv + 4.0)
        );
    }
    let _ = writeln!(
        s,
        "  <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">evidence fraction kappa = K / N</text>",
        px((MARGIN_L + CHART_W - MARGIN_R) / 2.0),
        px(CHART_H - 10.0)
    );
    let _ = writeln!(
        s,
        "  <text x=\"16\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">true-class probability</text>",
        px((MARGIN_T + CHART_H - MARGIN_B) / 2.0),
        px((MARGIN_T + CHART_H - MARGIN_B) / 2.0)
    );
    s.push_str("</svg>\n");
    Ok(s)
}

/// Smallest positive gap between distinct sorted values, if any.
fn min_gap(vals: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = vals.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("coordinates must not be NaN"));
    let mut best: Option<f64> = None;
    for w in v.windows(2) {
        let g = w[1] - w[0];
        if g > 1e-12 && best.map_or(true, |b| g < b) {
            best = Some(g);
        }
    }
    best
}

/// Renders one slide's evidence map: a rectangle per tile at its (u, v)
/// coordinate, shaded by gate value, with the `top_k` highest-ranked
/// tiles outlined in green. The view box is fitted to the coordinate
/// extent; the tile size is inferred from the smallest coordinate gap so
/// regular grids tessellate cleanly. Rows must be in ranking order
/// (descending selection logit), as produced by the evidence export.
pub fn overlay_svg(rows: &[EvidenceExportRow], top_k: usize) -> Result<String, MetricsError> {
    if rows.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let us: Vec<f64> = rows.iter().map(|r| r.u).collect();
    let vs: Vec<f64> = rows.iter().map(|r| r.v).collect();
    let cell = match (min_gap(&us), min_gap(&vs)) {
        (Some(a), Some(b)) => a.min(b),
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => 1.0,
    };
    let (min_u, max_u) = us.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &u| {
        (lo.min(u), hi.max(u))
    });
    let (min_v, max_v) = vs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let x0 = min_u - cell;
    let y0 = min_v - cell;
    let w = (max_u - min_u) + 2.0 * cell;
    let h = (max_v - min_v) + 2.0 * cell;
    let render_h = (640.0 * h / w).round();
    let top_k = top_k.min(rows.len());

    let c4 = |v: f64| format!("{v:.4}");
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"{render_h}\" viewBox=\"{} {} {} {}\">",
        c4(x0),
        c4(y0),
        c4(w),
        c4(h)
    );
    let _ = writeln!(
        s,
        "  <rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"#ffffff\" stroke=\"#888888\" stroke-width=\"{}\"/>",
        c4(x0),
        c4(y0),
        c4(w),
        c4(h),
        c4(cell * 0.05)
    );
    for r in rows {
        let _ = writeln!(
            s,
            "  <rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"#1f6feb\" fill-opacity=\"{}\"><title>tile {} gate {}</title></rect>",
            c4(r.u - cell / 2.0),
            c4(r.v - cell / 2.0),
            c4(cell),
            c4(cell),
            c4(r.gate.clamp(0.0, 1.0)),
            r.tile_index,
            c4(r.gate)
        );
    }
    // Green outlines over the top-K ranked tiles, drawn last to sit on top.
    for r in rows.iter().take(top_k) {
        let _ = writeln!(
            s,
            "  <rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#2da44e\" stroke-width=\"{}\"/>",
            c4(r.u - cell / 2.0),
            c4(r.v - cell / 2.0),
            c4(cell),
            c4(cell),
            c4(cell * 0.12)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}
