//! Tabular results and line charts.
//!
//! Every curve is written as rows of `model,condition,token_set,layer,metric,value`
//! with a header row. An empty `value` means the statistic is undefined at
//! that layer (for example Spearman ρ of a constant sequence).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub condition: String,
    pub token_set: String,
    pub layer: usize,
    pub metric: String,
    pub value: Option<f64>,
}

pub fn write_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    // serialize() skips the header when there are no rows
    w.write_record(["model", "condition", "token_set", "layer", "metric", "value"])?;
    for r in rows {
        w.write_record([
            r.model.as_str(),
            &r.condition,
            &r.token_set,
            &r.layer.to_string(),
            &r.metric,
            &r.value.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let header = r.headers()?.clone();
    if header.iter().ne(["model", "condition", "token_set", "layer", "metric", "value"]) {
        return Err(Error::Invalid(format!(
            "{}: expected header model,condition,token_set,layer,metric,value",
            path.display()
        )));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Invalid(format!("{}: {e}", path.display()))))
        .collect()
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Invalid(format!("{}: {other:?}", path.display())),
    }
}

/// Named polyline for [`line_chart_svg`].
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 8] = ["#d62728", "#ff7f0e", "#2ca02c", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#17becf"];
const MARKER_COLOR: &str = "#1f77b4";

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Standalone SVG line chart. `marker_x` draws a vertical line (the phase
/// change). Data points are repeated in an XML comment so the figure can be
/// re-plotted without its CSV.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, series: &[Series], marker_x: Option<f64>) -> String {
    let (w, h) = (720.0, 440.0);
    let (left, right, top, bottom) = (70.0, 190.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;

    let finite = series.iter().flat_map(|s| &s.points).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in finite {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if let Some(m) = marker_x {
        x0 = x0.min(m);
        x1 = x1.max(m);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    y0 = y0.min(0.0);
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let pad = (y1 - y0) * 0.05;
    let (y0, y1) = (y0 - pad, y1 + pad);
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#);
    s.push_str("<!-- data\n");
    for se in series {
        let pts: Vec<String> = se.points.iter().map(|(x, y)| format!("{x},{y}")).collect();
        let _ = writeln!(s, "{}: {}", esc(&se.name).replace("--", "- -"), pts.join(" "));
    }
    if let Some(m) = marker_x {
        let _ = writeln!(s, "phase_change: {m}");
    }
    s.push_str("-->\n");
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, left + pw / 2.0, esc(title));
    let _ = writeln!(s, r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for i in 0..=4 {
        let yv = y0 + (y1 - y0) * i as f64 / 4.0;
        let xv = x0 + (x1 - x0) * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, left - 6.0, sy(yv) + 4.0, fmt_tick(yv));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, sx(xv), top + ph + 16.0, fmt_tick(xv));
    }
    if y0 < 0.0 && y1 > 0.0 {
        let _ = writeln!(s, r##"<line x1="{left}" y1="{0:.2}" x2="{1}" y2="{0:.2}" stroke="#bbbbbb" stroke-dasharray="3,3"/>"##, sy(0.0), left + pw);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, left + pw / 2.0, h - 12.0, esc(x_label));
    let _ = writeln!(s, r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#, top + ph / 2.0, esc(y_label));
    if let Some(m) = marker_x {
        let _ = writeln!(s, r#"<line x1="{0:.2}" y1="{top}" x2="{0:.2}" y2="{1}" stroke="{MARKER_COLOR}" stroke-width="2"/>"#, sx(m), top + ph);
    }
    for (k, se) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        // undefined points break the line
        let mut segments: Vec<Vec<String>> = vec![vec![]];
        for &(x, y) in &se.points {
            if x.is_finite() && y.is_finite() {
                segments.last_mut().unwrap().push(format!("{:.2},{:.2}", sx(x), sy(y)));
            } else if !segments.last().unwrap().is_empty() {
                segments.push(vec![]);
            }
        }
        for seg in segments.iter().filter(|s| !s.is_empty()) {
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, seg.join(" "));
        }
        let ly = top + 14.0 + 18.0 * k as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(s, r#"<line x1="{lx}" y1="{0}" x2="{1}" y2="{0}" stroke="{color}" stroke-width="2"/>"#, ly - 4.0, lx + 18.0);
        let _ = writeln!(s, r#"<text x="{}" y="{ly}">{}</text>"#, lx + 24.0, esc(&se.name));
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.trunc() {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// Group rows by `(model, condition)`; within a group each
/// `(token_set, metric)` pair is one series ordered by layer.
pub fn group_series(rows: &[ReportRow]) -> BTreeMap<(String, String), Vec<Series>> {
    let mut groups: BTreeMap<(String, String), BTreeMap<(String, String), Vec<(f64, f64)>>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.model.clone(), r.condition.clone()))
            .or_default()
            .entry((r.token_set.clone(), r.metric.clone()))
            .or_default()
            .push((r.layer as f64, r.value.unwrap_or(f64::NAN)));
    }
    groups
        .into_iter()
        .map(|(k, series)| {
            let v = series
                .into_iter()
                .map(|((token_set, metric), mut points)| {
                    points.sort_by(|a, b| a.0.total_cmp(&b.0));
                    Series { name: format!("{token_set} {metric}"), points }
                })
                .collect();
            (k, v)
        })
        .collect()
}
