//! Standalone SVG chart of a certificate curve with optional trial points.

use std::fmt::Write;

use crate::error::{Error, Result};
use crate::fairgen::{CurvePoint, ShiftTrial};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 56.0;
const TICKS: usize = 5;

/// Rendered chart and the data ranges mapped onto its axes.
#[derive(Debug, Clone, PartialEq)]
pub struct Chart {
    pub svg: String,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
}

fn widen(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

/// Draws the feasible part of `curve` as one polyline and each trial as a
/// grey dot. The horizontal axis is the Hellinger radius, the vertical axis
/// the loss starting at zero.
pub fn render_svg(curve: &[CurvePoint], trials: &[ShiftTrial]) -> Result<Chart> {
    if curve.is_empty() {
        return Err(Error::MalformedProblem("cannot plot an empty sweep".into()));
    }
    let xs = curve.iter().map(|c| c.rho).chain(trials.iter().map(|t| t.distance));
    let (x_lo, x_hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let y_max = curve
        .iter()
        .filter_map(|c| c.bound)
        .chain(trials.iter().map(|t| t.loss))
        .fold(0.0, f64::max);
    let x_range = widen(x_lo, x_hi);
    let y_range = if y_max > 0.0 { (0.0, y_max) } else { (0.0, 1.0) };

    let px = |x: f64| MARGIN + (x - x_range.0) / (x_range.1 - x_range.0) * (WIDTH - 2.0 * MARGIN);
    let py = |y: f64| HEIGHT - MARGIN - (y - y_range.0) / (y_range.1 - y_range.0) * (HEIGHT - 2.0 * MARGIN);

    let mut svg = String::new();
    let w = &mut svg;
    // Writing into a String cannot fail.
    let _ = writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(w, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        w,
        r#"<g stroke="black" stroke-width="1"><line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}"/><line x1="{left}" y1="{bottom}" x2="{left}" y2="{top}"/></g>"#
    );
    let _ = writeln!(w, r#"<g font-family="sans-serif" font-size="11" fill="black">"#);
    for i in 0..=TICKS {
        let f = i as f64 / TICKS as f64;
        let xv = x_range.0 + f * (x_range.1 - x_range.0);
        let yv = y_range.0 + f * (y_range.1 - y_range.0);
        let _ = writeln!(
            w,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{xv:.3}</text>"#,
            px(xv),
            bottom + 16.0
        );
        let _ = writeln!(
            w,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{yv:.3}</text>"#,
            left - 6.0,
            py(yv) + 4.0
        );
    }
    let _ = writeln!(
        w,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">Hellinger distance</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        w,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">loss</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );
    let _ = writeln!(w, "</g>");
    if !trials.is_empty() {
        let _ = writeln!(w, r##"<g fill="#999999" fill-opacity="0.6">"##);
        for t in trials {
            let _ = writeln!(w, r#"<circle cx="{:.2}" cy="{:.2}" r="2"/>"#, px(t.distance), py(t.loss));
        }
        let _ = writeln!(w, "</g>");
    }
    let points: Vec<String> = curve
        .iter()
        .filter_map(|c| c.bound.map(|b| format!("{:.2},{:.2}", px(c.rho), py(b))))
        .collect();
    let _ = writeln!(
        w,
        r#"<polyline fill="none" stroke="black" stroke-width="2" points="{}"/>"#,
        points.join(" ")
    );
    let _ = writeln!(w, "</svg>");
    Ok(Chart { svg, x_range, y_range })
}
