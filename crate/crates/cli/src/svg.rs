//! Minimal SVG line charts for training curves.

use std::fmt::Write;

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];
const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 260.0;
const MARGIN: f64 = 50.0;

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

pub struct Panel {
    pub title: String,
    pub series: Vec<Series>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn bounds(panel: &Panel) -> (f64, f64, f64, f64) {
    let pts = panel.series.iter().flat_map(|s| s.points.iter()).filter(|p| p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pad = 0.05 * (y1 - y0);
    (x0, x1, y0 - pad, y1 + pad)
}

fn draw_panel(out: &mut String, panel: &Panel, ox: f64, oy: f64) {
    let (x0, x1, y0, y1) = bounds(panel);
    let sx = |x: f64| ox + MARGIN + (x - x0) / (x1 - x0) * (PANEL_W - 1.5 * MARGIN);
    let sy = |y: f64| oy + PANEL_H - MARGIN + -(y - y0) / (y1 - y0) * (PANEL_H - 1.8 * MARGIN);
    let (left, right) = (sx(x0), sx(x1));
    let (bottom, top) = (sy(y0), sy(y1));
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" font-size="14" text-anchor="middle">{}</text>"#,
        (left + right) / 2.0,
        oy + 22.0,
        escape(&panel.title)
    );
    let _ = writeln!(
        out,
        r##"<rect x="{left:.1}" y="{top:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#444"/>"##,
        right - left,
        bottom - top
    );
    for i in 0..=4 {
        let v = y0 + (y1 - y0) * i as f64 / 4.0;
        let y = sy(v);
        let _ = writeln!(
            out,
            r##"<line x1="{left:.1}" y1="{y:.1}" x2="{right:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{v:.3}</text>"##,
            left - 4.0,
            y + 3.0
        );
    }
    for i in 0..=4 {
        let v = x0 + (x1 - x0) * i as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{v:.0}</text>"#,
            sx(v),
            bottom + 14.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">epoch</text>"#,
        (left + right) / 2.0,
        bottom + 30.0
    );
    for (k, s) in panel.series.iter().enumerate() {
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline class="series" data-label="{}" fill="none" stroke="{}" stroke-width="1.8" points="{}"/>"#,
            escape(&s.label),
            PALETTE[k % PALETTE.len()],
            pts.join(" ")
        );
    }
}

/// Panels side by side with a shared legend underneath, then optional table rows.
pub fn chart(panels: &[Panel], table: &[Vec<String>]) -> String {
    let labels: Vec<&str> = panels
        .first()
        .map(|p| p.series.iter().map(|s| s.label.as_str()).collect())
        .unwrap_or_default();
    let width = PANEL_W * panels.len().max(1) as f64;
    let legend_h = 18.0 * labels.len() as f64 + 10.0;
    let table_h = if table.is_empty() { 0.0 } else { 18.0 * table.len() as f64 + 20.0 };
    let height = PANEL_H + legend_h + table_h;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, p) in panels.iter().enumerate() {
        draw_panel(&mut out, p, PANEL_W * i as f64, 0.0);
    }
    for (k, l) in labels.iter().enumerate() {
        let y = PANEL_H + 14.0 + 18.0 * k as f64;
        let _ = writeln!(
            out,
            r#"<line x1="{m:.1}" y1="{y1:.1}" x2="{m2:.1}" y2="{y1:.1}" stroke="{c}" stroke-width="3"/><text class="legend" x="{tx:.1}" y="{y:.1}" font-size="12">{}</text>"#,
            escape(l),
            m = MARGIN,
            m2 = MARGIN + 24.0,
            y1 = y - 4.0,
            c = PALETTE[k % PALETTE.len()],
            tx = MARGIN + 30.0
        );
    }
    let ty = PANEL_H + legend_h + 14.0;
    for (r, row) in table.iter().enumerate() {
        let weight = if r == 0 { "bold" } else { "normal" };
        for (c, cell) in row.iter().enumerate() {
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" font-size="11" font-weight="{weight}">{}</text>"#,
                MARGIN + 88.0 * c as f64,
                ty + 18.0 * r as f64,
                escape(cell)
            );
        }
    }
    out.push_str("</svg>\n");
    out
}
