// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minimal scatter-plot writer: fixed 800x600 canvas, linear axes.

use std::fmt::Write;

pub const WIDTH: f64 = 800.0;
pub const HEIGHT: f64 = 600.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 50.0;
const BOTTOM: f64 = 60.0;

const COLORS: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

pub struct Series {
    pub name: String,
    pub layer: usize,
    /// Filled markers.
    pub steered: Vec<(f64, f64)>,
    /// Hollow markers.
    pub default: Vec<(f64, f64)>,
}

pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub series: Vec<Series>,
    /// Dashed horizontal reference lines: (label, y).
    pub references: Vec<(String, f64)>,
}

pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![lo];
    }
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 2.5, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= 6.0)
        .unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + step * 1e-9 {
        out.push(if t.abs() < step * 1e-9 { 0.0 } else { t });
        t += step;
    }
    out
}

impl Plot {
    fn sx(&self, x: f64) -> f64 {
        let (lo, hi) = self.x_range;
        LEFT + (x - lo) / (hi - lo) * (WIDTH - LEFT - RIGHT)
    }

    fn sy(&self, y: f64) -> f64 {
        let (lo, hi) = self.y_range;
        HEIGHT - BOTTOM - (y.clamp(lo, hi) - lo) / (hi - lo) * (HEIGHT - TOP - BOTTOM)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="28" font-size="16" text-anchor="middle">{}</text>"#,
            (LEFT + WIDTH - RIGHT) / 2.0,
            escape(&self.title)
        );
        let (x0, x1) = (LEFT, WIDTH - RIGHT);
        let (y0, y1) = (HEIGHT - BOTTOM, TOP);
        let _ = writeln!(
            s,
            r#"<g class="axes" stroke="black" fill="none"><line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}"/><line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}"/></g>"#
        );
        s.push_str("<g class=\"ticks\">\n");
        for t in ticks(self.x_range.0, self.x_range.1) {
            let x = self.sx(t);
            let _ = writeln!(
                s,
                r#"<line x1="{x:.2}" y1="{y0}" x2="{x:.2}" y2="{}" stroke="black"/><text x="{x:.2}" y="{}" text-anchor="middle">{t}</text>"#,
                y0 + 5.0,
                y0 + 20.0
            );
        }
        for t in ticks(self.y_range.0, self.y_range.1) {
            let y = self.sy(t);
            let _ = writeln!(
                s,
                r#"<line x1="{}" y1="{y:.2}" x2="{x0}" y2="{y:.2}" stroke="black"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"#,
                x0 - 5.0,
                x0 - 8.0,
                y + 4.0,
                (t * 1e6).round() / 1e6
            );
        }
        s.push_str("</g>\n");
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            (x0 + x1) / 2.0,
            HEIGHT - 15.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#,
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0,
            escape(&self.y_label)
        );

        for (i, series) in self.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let _ = writeln!(
                s,
                r#"<g class="series" data-layer="{}" fill="{color}" stroke="{color}">"#,
                series.layer
            );
            for &(x, y) in &series.default {
                let _ = writeln!(
                    s,
                    r#"<circle class="default" cx="{:.2}" cy="{:.2}" r="4" fill="none"/>"#,
                    self.sx(x),
                    self.sy(y)
                );
            }
            for &(x, y) in &series.steered {
                let _ = writeln!(
                    s,
                    r#"<circle class="steered" cx="{:.2}" cy="{:.2}" r="3"/>"#,
                    self.sx(x),
                    self.sy(y)
                );
            }
            s.push_str("</g>\n");
            let ly = TOP + 20.0 + 20.0 * i as f64;
            let _ = writeln!(
                s,
                r#"<g class="legend"><circle cx="{}" cy="{ly}" r="4" fill="{color}"/><text x="{}" y="{}">{}</text></g>"#,
                x1 + 15.0,
                x1 + 25.0,
                ly + 4.0,
                escape(&series.name)
            );
        }
        let base = TOP + 20.0 + 20.0 * self.series.len() as f64;
        let _ = writeln!(
            s,
            r#"<g class="legend"><circle cx="{}" cy="{base}" r="4" fill="none" stroke="black"/><text x="{}" y="{}">default arm</text></g>"#,
            x1 + 15.0,
            x1 + 25.0,
            base + 4.0
        );
        for (label, y) in &self.references {
            let py = self.sy(*y);
            let _ = writeln!(
                s,
                r#"<line class="reference" data-value="{y}" x1="{x0}" y1="{py:.2}" x2="{x1}" y2="{py:.2}" stroke="black" stroke-dasharray="6 4"/><text x="{}" y="{:.2}">{}</text>"#,
                x1 + 5.0,
                py + 4.0,
                escape(label)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ticks_cover_range() {
        let t = ticks(-100.0, 100.0);
        assert_eq!(t.first(), Some(&-100.0));
        assert_eq!(t.last(), Some(&100.0));
        assert!(t.contains(&0.0));
        assert_eq!(ticks(0.0, 1.0).len(), 6);
    }

    #[test]
    fn escaping() {
        assert_eq!(escape("a<b & \"c\""), "a&lt;b &amp; &quot;c&quot;");
    }
}
