use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{io_err, ReportError, Result};

/// Quantile of sorted data by linear interpolation between closest ranks:
/// position `(n - 1) p`, as numpy's default method.
pub fn quantile_linear(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoxStats {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    /// Most extreme data points within 1.5 IQR of the box, never inside
    /// the box itself.
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
}

pub fn box_stats(values: &[f64]) -> Option<BoxStats> {
    if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile_linear(&sorted, 0.25);
    let median = quantile_linear(&sorted, 0.5);
    let q3 = quantile_linear(&sorted, 0.75);
    let iqr = q3 - q1;
    let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside: Vec<f64> = sorted.iter().copied().filter(|v| (lo_fence..=hi_fence).contains(v)).collect();
    Some(BoxStats {
        q1,
        median,
        q3,
        whisker_low: inside[0].min(q1),
        whisker_high: inside[inside.len() - 1].max(q3),
        outliers: sorted.iter().copied().filter(|v| !(lo_fence..=hi_fence).contains(v)).collect(),
    })
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const LEFT: f64 = 70.0;
const SLOT: f64 = 100.0;
const TOP: f64 = 20.0;
const BOTTOM: f64 = 300.0;

/// Box plot of named distributions, one box per entry.
pub fn emit_boxplot_svg(distributions: &[(String, Vec<f64>)], out_path: &Path) -> Result<Vec<BoxStats>> {
    if distributions.is_empty() {
        return Err(ReportError::EmptyDistribution("no distributions given".into()));
    }
    let stats = distributions
        .iter()
        .map(|(name, values)| {
            box_stats(values).ok_or_else(|| ReportError::EmptyDistribution(format!("`{name}` is empty or not finite")))
        })
        .collect::<Result<Vec<_>>>()?;

    let all = distributions.iter().flat_map(|(_, v)| v.iter().copied());
    let (min, max) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let pad = if max > min { 0.05 * (max - min) } else { 0.05 * min.abs().max(1.0) };
    let (lo, hi) = (min - pad, max + pad);
    let y = |v: f64| BOTTOM - (v - lo) / (hi - lo) * (BOTTOM - TOP);

    let width = LEFT + SLOT * distributions.len() as f64 + 20.0;
    let height = BOTTOM + 50.0;
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r##"<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>"##);
    let _ = writeln!(s, r##"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{BOTTOM}" stroke="#000000"/>"##);
    for t in 0..=4 {
        let v = lo + (hi - lo) * t as f64 / 4.0;
        let yy = y(v);
        let _ = writeln!(s, r##"<line x1="{}" y1="{yy:.2}" x2="{LEFT}" y2="{yy:.2}" stroke="#000000"/>"##, LEFT - 4.0);
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{v:.3}</text>"#, LEFT - 6.0, yy + 4.0);
    }
    for (i, ((name, _), b)) in distributions.iter().zip(&stats).enumerate() {
        let cx = LEFT + SLOT * i as f64 + SLOT / 2.0;
        let (x0, x1) = (cx - 20.0, cx + 20.0);
        let _ = writeln!(s, r#"<g class="box">"#);
        for (from, to) in [(b.whisker_low, b.q1), (b.q3, b.whisker_high)] {
            let _ = writeln!(s, r##"<line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="#000000"/>"##, y(from), y(to));
        }
        for w in [b.whisker_low, b.whisker_high] {
            let _ = writeln!(
                s,
                r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#000000"/>"##,
                cx - 10.0,
                y(w),
                cx + 10.0,
                y(w)
            );
        }
        let _ = writeln!(
            s,
            r##"<rect x="{x0:.2}" y="{:.2}" width="40" height="{:.2}" fill="#cfe0f3" stroke="#000000"/>"##,
            y(b.q3),
            y(b.q1) - y(b.q3)
        );
        let _ = writeln!(
            s,
            r##"<line x1="{x0:.2}" y1="{:.2}" x2="{x1:.2}" y2="{:.2}" stroke="#c00000" stroke-width="2"/>"##,
            y(b.median),
            y(b.median)
        );
        for &o in &b.outliers {
            let _ = writeln!(s, r##"<circle cx="{cx:.2}" cy="{:.2}" r="2.5" fill="none" stroke="#000000"/>"##, y(o));
        }
        let _ = writeln!(s, r#"<text x="{cx:.2}" y="{}" text-anchor="middle">{}</text>"#, BOTTOM + 20.0, escape(name));
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    fs::write(out_path, s).map_err(io_err(out_path))?;
    Ok(stats)
}
