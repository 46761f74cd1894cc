//! Bare-bones SVG renderings of agreement plots.

use std::fmt::Write as _;

use crate::evaluate::BlandAltman;

const W: f64 = 480.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let bounds = |it: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = it.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
                (a.min(v), b.max(v))
            });
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 1.0, hi + 1.0)
            } else {
                let m = (hi - lo) * 0.05;
                (lo - m, hi + m)
            }
        };
        let (x0, x1) = bounds(&mut xs.clone());
        let (y0, y1) = bounds(&mut ys.clone());
        Frame { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        PAD + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        H - PAD - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * PAD)
    }
}

fn open(svg: &mut String, title: &str, xlabel: &str, ylabel: &str) {
    let _ = write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = write!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = write!(
        svg,
        r#"<text x="{}" y="20" text-anchor="middle">{title}</text>"#,
        W / 2.0
    );
    let _ = write!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">{xlabel}</text>"#,
        W / 2.0,
        H - 10.0
    );
    let _ = write!(
        svg,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{ylabel}</text>"#,
        H / 2.0,
        H / 2.0
    );
    let _ = write!(
        svg,
        r#"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
}

fn hline(svg: &mut String, f: &Frame, y: f64, dash: bool) {
    let _ = write!(
        svg,
        r#"<line x1="{PAD}" x2="{}" y1="{y:.2}" y2="{y:.2}" stroke="gray"{}/>"#,
        W - PAD,
        if dash {
            r#" stroke-dasharray="4 3""#
        } else {
            ""
        },
        y = f.py(y)
    );
}

/// Reference (x) against automatic (y) with the identity line.
pub fn scatter_svg(title: &str, reference: &[f64], automatic: &[f64]) -> String {
    let all = reference.iter().chain(automatic).copied();
    let f = Frame::fit(all.clone(), all);
    let mut svg = String::new();
    open(&mut svg, title, "reference", "automatic");
    let _ = write!(
        svg,
        r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="gray" stroke-dasharray="4 3"/>"#,
        f.px(f.x0),
        f.py(f.x0),
        f.px(f.x1),
        f.py(f.x1)
    );
    for (x, y) in reference.iter().zip(automatic) {
        let _ = write!(
            svg,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="steelblue"/>"#,
            f.px(*x),
            f.py(*y)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Mean (x) against difference (y) with bias and limits of agreement.
pub fn bland_altman_svg(title: &str, ba: &BlandAltman) -> String {
    let xs = ba.points.iter().map(|p| p.0);
    let ys = ba
        .points
        .iter()
        .map(|p| p.1)
        .chain([ba.loa_low, ba.loa_high]);
    let f = Frame::fit(xs, ys);
    let mut svg = String::new();
    open(&mut svg, title, "mean", "difference");
    hline(&mut svg, &f, ba.bias, false);
    hline(&mut svg, &f, ba.loa_low, true);
    hline(&mut svg, &f, ba.loa_high, true);
    for (x, y) in &ba.points {
        let _ = write!(
            svg,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="steelblue"/>"#,
            f.px(*x),
            f.py(*y)
        );
    }
    svg.push_str("</svg>\n");
    svg
}
