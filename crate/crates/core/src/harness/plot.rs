//! Self-contained SVG line charts: one mean curve per arm over a shaded
//! band of one standard deviation.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::runner::Summary;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    Accuracy,
    Loss,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotLabels {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
}

const WIDTH: f64 = 760.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 190.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// A step from {1, 2, 5} x 10^k giving at most `max_ticks` intervals.
fn tick_step(span: f64, max_ticks: usize) -> f64 {
    let raw = span / max_ticks as f64;
    let mag = 10f64.powf(raw.log10().floor());
    [1.0, 2.0, 5.0, 10.0].into_iter().map(|m| m * mag).find(|&s| s >= raw).unwrap_or(10.0 * mag)
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.3}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

struct Frame {
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn x(&self, round: f64) -> f64 {
        LEFT + (round - 1.0) / (self.x_max - 1.0) * (WIDTH - LEFT - RIGHT)
    }

    fn y(&self, v: f64) -> f64 {
        let v = v.clamp(self.y_min, self.y_max);
        HEIGHT - BOTTOM - (v - self.y_min) / (self.y_max - self.y_min) * (HEIGHT - TOP - BOTTOM)
    }
}

fn series(s: &Summary, kind: PlotKind) -> (&[f64], Option<&[f64]>) {
    match kind {
        PlotKind::Accuracy => (&s.mean_accuracy, Some(&s.std_accuracy)),
        PlotKind::Loss => (&s.mean_loss, None),
    }
}

/// Render the chart. Identical inputs give identical bytes.
pub fn render_svg(summaries: &[&Summary], kind: PlotKind, labels: &PlotLabels) -> Result<String> {
    if summaries.is_empty() || summaries.iter().all(|s| series(s, kind).0.is_empty()) {
        return Err(Error::Plot("nothing to plot".into()));
    }
    for s in summaries {
        let (mean, std) = series(s, kind);
        if mean.iter().chain(std.unwrap_or(&[])).any(|v| !v.is_finite()) {
            return Err(Error::Plot(format!("series `{}` has non-finite values", s.label)));
        }
    }
    let len = summaries.iter().map(|s| series(s, kind).0.len()).max().unwrap_or(0);
    let y_max = match kind {
        PlotKind::Accuracy => 1.0,
        PlotKind::Loss => {
            let top = summaries.iter().flat_map(|s| series(s, kind).0.iter().copied()).fold(0.0, f64::max);
            if top > 0.0 { top * 1.05 } else { 1.0 }
        }
    };
    let frame = Frame { x_max: len.max(2) as f64, y_min: 0.0, y_max };

    let mut out = String::new();
    let w = &mut out;
    writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(w, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#).unwrap();
    writeln!(w, r#"<text x="{:.2}" y="24" text-anchor="middle" font-size="15">{}</text>"#, (LEFT + WIDTH - RIGHT) / 2.0, escape(&labels.title)).unwrap();

    // grid and ticks
    let y_step = tick_step(frame.y_max - frame.y_min, 5);
    let mut v = frame.y_min;
    while v <= frame.y_max + 1e-9 {
        let y = frame.y(v);
        writeln!(w, r##"<line x1="{LEFT:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#dddddd"/>"##, WIDTH - RIGHT).unwrap();
        writeln!(w, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, LEFT - 6.0, y + 4.0, fmt_tick(v)).unwrap();
        v += y_step;
    }
    let x_step = tick_step(frame.x_max - 1.0, 8).max(1.0);
    let mut r = x_step;
    let mut xs = vec![1.0];
    while r <= frame.x_max + 1e-9 {
        if r > 1.0 {
            xs.push(r);
        }
        r += x_step;
    }
    for r in xs {
        let x = frame.x(r);
        writeln!(w, r##"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#dddddd"/>"##, TOP, HEIGHT - BOTTOM).unwrap();
        writeln!(w, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, HEIGHT - BOTTOM + 16.0, fmt_tick(r)).unwrap();
    }
    writeln!(
        w,
        r#"<rect x="{LEFT:.2}" y="{TOP:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="black"/>"#,
        WIDTH - LEFT - RIGHT,
        HEIGHT - TOP - BOTTOM
    )
    .unwrap();
    writeln!(w, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, (LEFT + WIDTH - RIGHT) / 2.0, HEIGHT - 18.0, escape(&labels.x_label)).unwrap();
    let cy = (TOP + HEIGHT - BOTTOM) / 2.0;
    writeln!(w, r#"<text x="20" y="{cy:.2}" text-anchor="middle" transform="rotate(-90 20 {cy:.2})">{}</text>"#, escape(&labels.y_label)).unwrap();

    // bands first so every mean curve stays visible
    for (i, s) in summaries.iter().enumerate() {
        let (mean, std) = series(s, kind);
        let Some(std) = std else { continue };
        if mean.is_empty() {
            continue;
        }
        let upper = mean.iter().zip(std).enumerate().map(|(t, (m, sd))| (t, m + sd));
        let lower = mean.iter().zip(std).enumerate().rev().map(|(t, (m, sd))| (t, m - sd));
        let pts: Vec<String> =
            upper.chain(lower).map(|(t, v)| format!("{:.2},{:.2}", frame.x(t as f64 + 1.0), frame.y(v))).collect();
        writeln!(w, r#"<polygon points="{}" fill="{}" fill-opacity="0.18" stroke="none"/>"#, pts.join(" "), PALETTE[i % PALETTE.len()]).unwrap();
    }
    for (i, s) in summaries.iter().enumerate() {
        let (mean, _) = series(s, kind);
        if mean.is_empty() {
            continue;
        }
        let pts: Vec<String> =
            mean.iter().enumerate().map(|(t, &v)| format!("{:.2},{:.2}", frame.x(t as f64 + 1.0), frame.y(v))).collect();
        writeln!(
            w,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.8"/>"#,
            pts.join(" "),
            PALETTE[i % PALETTE.len()]
        )
        .unwrap();
    }

    // legend
    let lx = WIDTH - RIGHT + 16.0;
    for (i, s) in summaries.iter().enumerate() {
        let ly = TOP + 10.0 + 20.0 * i as f64;
        writeln!(w, r#"<rect x="{lx:.2}" y="{:.2}" width="18" height="4" fill="{}"/>"#, ly - 2.0, PALETTE[i % PALETTE.len()]).unwrap();
        writeln!(w, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, lx + 24.0, ly + 4.0, escape(&s.label)).unwrap();
    }
    writeln!(w, "</svg>").unwrap();
    Ok(out)
}

pub fn emit_plot(summaries: &[&Summary], kind: PlotKind, labels: &PlotLabels, path: &Path) -> Result<()> {
    let svg = render_svg(summaries, kind, labels)?;
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}
