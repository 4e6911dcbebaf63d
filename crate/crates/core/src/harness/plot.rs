//! Deterministic SVG line charts of a metrics stream.
//!
//! Output depends only on the records, so identical input re-renders to
//! identical bytes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::metrics::{write_atomic, MetricsRecord};
use crate::error::Result;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const TICKS: usize = 5;

struct ChartSpec {
    file: &'static str,
    title: &'static str,
    y_label: &'static str,
    value: fn(&MetricsRecord) -> Option<f64>,
    /// Draw the episode cost limit as a horizontal reference line.
    cost_reference: bool,
}

const CHARTS: [ChartSpec; 8] = [
    ChartSpec {
        file: "episode_return.svg",
        title: "Training episode return",
        y_label: "return",
        value: |r| r.episode_return,
        cost_reference: false,
    },
    ChartSpec {
        file: "episode_cost.svg",
        title: "Training episode cost",
        y_label: "cost",
        value: |r| r.episode_cost,
        cost_reference: true,
    },
    ChartSpec {
        file: "eval_return.svg",
        title: "Evaluation return",
        y_label: "return",
        value: |r| r.eval_return,
        cost_reference: false,
    },
    ChartSpec {
        file: "eval_cost.svg",
        title: "Evaluation cost",
        y_label: "cost",
        value: |r| r.eval_cost,
        cost_reference: true,
    },
    ChartSpec {
        file: "cost_bias.svg",
        title: "Cost estimation bias (critic - Monte Carlo)",
        y_label: "bias",
        value: |r| r.cost_bias,
        cost_reference: false,
    },
    ChartSpec {
        file: "conflict_ratio.svg",
        title: "Exploration gradient conflict ratio",
        y_label: "ratio",
        value: |r| Some(r.conflict_ratio),
        cost_reference: false,
    },
    ChartSpec {
        file: "lambda.svg",
        title: "Lagrange multiplier",
        y_label: "lambda",
        value: |r| Some(r.lambda),
        cost_reference: false,
    },
    ChartSpec {
        file: "delta.svg",
        title: "Trust region radius",
        y_label: "delta",
        value: |r| Some(r.delta),
        cost_reference: false,
    },
];

/// Writes one chart per metric into `out_dir` and returns the paths.
pub fn emit_plots(records: &[MetricsRecord], out_dir: &Path, cost_limit: Option<f64>) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::with_capacity(CHARTS.len());
    for spec in &CHARTS {
        let points: Vec<(f64, f64)> = records
            .iter()
            .filter_map(|r| (spec.value)(r).filter(|v| v.is_finite()).map(|v| (r.step as f64, v)))
            .collect();
        let reference = cost_limit.filter(|_| spec.cost_reference);
        let svg = render_chart(spec.title, spec.y_label, &points, reference);
        let path = out_dir.join(spec.file);
        write_atomic(&path, svg.as_bytes())?;
        written.push(path);
    }
    Ok(written)
}

/// Round number spacing for about `TICKS` intervals over `span`.
fn nice_step(span: f64) -> f64 {
    let raw = span / TICKS as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let nice = if norm <= 1.0 {
        1.0
    } else if norm <= 2.0 {
        2.0
    } else if norm <= 5.0 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

fn axis_range(lo: f64, hi: f64) -> (f64, f64, f64) {
    let (lo, hi) = if hi - lo < 1e-12 {
        let pad = if lo.abs() > 1e-12 { 0.5 * lo.abs() } else { 1.0 };
        (lo - pad, hi + pad)
    } else {
        (lo, hi)
    };
    let step = nice_step(hi - lo);
    ((lo / step).floor() * step, (hi / step).ceil() * step, step)
}

fn fmt_tick(v: f64) -> String {
    let v = if v.abs() < 1e-12 { 0.0 } else { v };
    if v.abs() >= 1e4 || (v != 0.0 && v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn render_chart(title: &str, y_label: &str, points: &[(f64, f64)], reference: Option<f64>) -> String {
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">environment step</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 10.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0,
        escape(y_label)
    );
    let _ = writeln!(
        svg,
        r#"<rect x="{LEFT}" y="{TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    );

    if points.is_empty() {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" fill="gray">no data</text>"#,
            LEFT + plot_w / 2.0,
            TOP + plot_h / 2.0
        );
        svg.push_str("</svg>\n");
        return svg;
    }

    let x_lo = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let x_hi = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let mut y_lo = points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let mut y_hi = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    if let Some(r) = reference {
        y_lo = y_lo.min(r);
        y_hi = y_hi.max(r);
    }
    let (x0, x1, x_step) = axis_range(x_lo, x_hi);
    let (y0, y1, y_step) = axis_range(y_lo, y_hi);
    let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * plot_w;
    let py = |y: f64| TOP + plot_h - (y - y0) / (y1 - y0) * plot_h;

    let mut t = x0;
    while t <= x1 + 0.5 * x_step {
        let x = px(t);
        let _ = writeln!(
            svg,
            r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            TOP + plot_h,
            TOP + plot_h + 5.0,
            TOP + plot_h + 18.0,
            fmt_tick(t)
        );
        t += x_step;
    }
    let mut t = y0;
    while t <= y1 + 0.5 * y_step {
        let y = py(t);
        let _ = writeln!(
            svg,
            r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#e0e0e0"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
            LEFT + plot_w,
            LEFT - 6.0,
            y + 4.0,
            fmt_tick(t)
        );
        t += y_step;
    }

    if let Some(r) = reference {
        let y = py(r);
        let _ = writeln!(
            svg,
            r#"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="red" stroke-dasharray="6 4"/><text x="{:.2}" y="{:.2}" text-anchor="end" fill="red">cost limit</text>"#,
            LEFT + plot_w,
            LEFT + plot_w - 4.0,
            y - 4.0
        );
    }

    let mut path = String::new();
    for (x, y) in points {
        if !path.is_empty() {
            path.push(' ');
        }
        let _ = write!(path, "{:.2},{:.2}", px(*x), py(*y));
    }
    if points.len() == 1 {
        let (x, y) = points[0];
        let _ = writeln!(svg, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="steelblue"/>"#, px(x), py(y));
    } else {
        let _ = writeln!(
            svg,
            r#"<polyline points="{path}" fill="none" stroke="steelblue" stroke-width="1.5"/>"#
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_series_has_labels_and_no_line() {
        let svg = render_chart("Return", "return", &[], Some(5.0));
        assert!(svg.contains("Return") && svg.contains("no data"));
        assert!(!svg.contains("polyline"));
    }

    #[test]
    fn two_points_give_one_segment() {
        let svg = render_chart("c", "y", &[(0.0, 0.0), (10.0, 1.0)], None);
        let line = svg.lines().find(|l| l.starts_with("<polyline")).unwrap();
        let pts = line.split('"').nth(1).unwrap();
        assert_eq!(pts.split(' ').count(), 2);
    }

    #[test]
    fn nice_steps() {
        assert_eq!(nice_step(10.0), 2.0);
        assert_eq!(nice_step(0.3), 0.1);
        let (lo, hi, _) = axis_range(3.0, 3.0);
        assert!(lo < 3.0 && hi > 3.0);
    }
}
